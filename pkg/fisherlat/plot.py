"""Static SVG heatmaps of scalar or metric fields with optional path overlays."""
import logging
from pathlib import Path
from typing import Optional, Sequence

import jinja2
import numpy as np
from matplotlib import colormaps
from matplotlib.colors import to_hex

from .models import ParamGrid

logger = logging.getLogger(__name__)

PATH_COLORS = ('#e41a1c', '#ffffff', '#ff7f00', '#f781bf')


def _env() -> jinja2.Environment:
    template_dir = Path(__file__).parent / 'templates'
    return jinja2.Environment(loader=jinja2.FileSystemLoader(str(template_dir)),
                              trim_blocks=True, lstrip_blocks=True, autoescape=True)


def render_heatmap(values, grid: ParamGrid, out, title: str = '', paths: Sequence[np.ndarray] = (),
                   flags: Optional[np.ndarray] = None, cmap: str = 'viridis', cell_px: int = 12) -> Path:
    """Write an SVG with one square per cell; t1 runs left to right and t2 bottom to top."""
    v = np.asarray(values, dtype=float).reshape(grid.shape)
    vmin, vmax = float(np.min(v)), float(np.max(v))
    scaled = np.full(v.shape, 0.5) if vmax == vmin else (v - vmin) / (vmax - vmin)
    cm = colormaps[cmap]
    width, height = grid.nx * cell_px, grid.ny * cell_px

    cells, flagged = [], []
    flat_flags = None if flags is None else np.asarray(flags, dtype=bool).reshape(grid.shape)
    for i in range(grid.nx):
        for j in range(grid.ny):
            cell = {'x': i * cell_px, 'y': (grid.ny - 1 - j) * cell_px, 'color': to_hex(cm(scaled[i, j]))}
            cells.append(cell)
            if flat_flags is not None and flat_flags[i, j]:
                flagged.append(cell)

    def to_px(p):
        x = (p[0] - grid.bounds[0]) / (grid.bounds[1] - grid.bounds[0]) * width
        y = (1.0 - (p[1] - grid.bounds[2]) / (grid.bounds[3] - grid.bounds[2])) * height
        return f"{x:.2f},{y:.2f}"

    overlays = [{'points': ' '.join(to_px(p) for p in np.asarray(path)), 'color': PATH_COLORS[k % len(PATH_COLORS)]}
                for k, path in enumerate(paths)]
    svg = _env().get_template('heatmap.svg.j2').render(
        width=width, height=height, cell_px=cell_px, cells=cells, flagged=flagged, paths=overlays,
        title=title, vmin=f"{vmin:.4g}", vmax=f"{vmax:.4g}")
    out = Path(out)
    out.write_text(svg, encoding='utf-8')
    logger.info(f"Wrote {out}")
    return out
