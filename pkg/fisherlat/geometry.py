"""Metric fields from potentials, geodesics by path-energy descent, and path scores.

Tensors are stored per cell in flat-index order as an (n_cells, 2, 2) array and
interpolated bilinearly between cell centers. Outside the hull of the centers
(but inside the grid bounds) the nearest edge value is used.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .artifacts import read_csv, read_json, sidecar_path, write_csv, write_json
from .errors import DomainError, SchemaError
from .models import ParamGrid, grid_from_sidecar
from .network import Adam
from .posterior import FeatureTable, feature_weights
from .potential import PotentialModel, input_hessian, values_on_grid

logger = logging.getLogger(__name__)

FLOOR_MIN = 1e-12
# 16-neighbourhood, one direction per undirected edge
GRAPH_OFFSETS = ((1, 0), (0, 1), (1, 1), (1, -1), (1, 2), (2, 1), (1, -2), (2, -1))


@dataclass(frozen=True)
class MetricField:
    grid: ParamGrid
    tensors: np.ndarray
    floor: float
    raw_min_eigenvalues: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.tensors.shape != (self.grid.n_cells, 2, 2):
            raise DomainError(f"tensors must be ({self.grid.n_cells}, 2, 2), got {self.tensors.shape}")
        if not np.all(np.isfinite(self.tensors)):
            raise DomainError('metric tensors must be finite')

    @property
    def degenerate(self) -> bool:
        raw = self.raw_min_eigenvalues
        return raw is not None and bool(np.all(raw < self.floor))

    def component(self, a: int, b: int) -> np.ndarray:
        return self.tensors[:, a, b].reshape(self.grid.shape)


@dataclass
class GeodesicPath:
    points: np.ndarray
    length: float
    straight_length: float
    energy_history: List[float] = field(default_factory=list)
    converged: bool = True


@dataclass(frozen=True)
class PhaseMap:
    grid: ParamGrid
    values: np.ndarray
    flags: np.ndarray
    threshold: float


# ---------------------------------------------------------------------------
# Metric fields
# ---------------------------------------------------------------------------

def project_tensors(tensors: np.ndarray, eps_factor: float = 1e-6) -> Tuple[np.ndarray, float, np.ndarray]:
    """Symmetrize and lift eigenvalues to the floor max(eps_factor * mean|trace|, 1e-12)."""
    sym = 0.5 * (tensors + np.swapaxes(tensors, -1, -2))
    w, V = np.linalg.eigh(sym)
    floor = max(eps_factor * float(np.mean(np.abs(np.trace(sym, axis1=-2, axis2=-1)))), FLOOR_MIN)
    raw_min = w[..., 0].copy()
    low = raw_min < floor
    if np.any(low):
        lifted = np.einsum('nij,nj,nkj->nik', V[low], np.maximum(w[low], floor), V[low])
        sym = sym.copy()
        sym[low] = 0.5 * (lifted + np.swapaxes(lifted, -1, -2))
    return sym, floor, raw_min


def _model_stencil_hessian(model: PotentialModel, points: np.ndarray, h: np.ndarray) -> np.ndarray:
    h1, h2 = h
    e1, e2 = np.array([h1, 0.0]), np.array([0.0, h2])
    v0 = model.values(points)
    H = np.empty((points.shape[0], 2, 2))
    H[:, 0, 0] = (model.values(points + e1) - 2.0 * v0 + model.values(points - e1)) / h1 ** 2
    H[:, 1, 1] = (model.values(points + e2) - 2.0 * v0 + model.values(points - e2)) / h2 ** 2
    H[:, 0, 1] = (model.values(points + e1 + e2) - model.values(points + e1 - e2)
                  - model.values(points - e1 + e2) + model.values(points - e1 - e2)) / (4.0 * h1 * h2)
    H[:, 1, 0] = H[:, 0, 1]
    return H


def _grid_stencil_hessian(values: np.ndarray, grid: ParamGrid) -> np.ndarray:
    v = values.reshape(grid.shape)
    d1, d2 = np.gradient(v, grid.dx, grid.dy, edge_order=2)
    d11, d12 = np.gradient(d1, grid.dx, grid.dy, edge_order=2)
    d21, d22 = np.gradient(d2, grid.dx, grid.dy, edge_order=2)
    H = np.empty((grid.n_cells, 2, 2))
    H[:, 0, 0] = d11.ravel()
    H[:, 1, 1] = d22.ravel()
    H[:, 0, 1] = H[:, 1, 0] = 0.5 * (d12 + d21).ravel()
    return H


def hessian_field(source: Union[PotentialModel, np.ndarray], grid: ParamGrid, mode: str = 'analytic',
                  h=None, eps_factor: float = 1e-6) -> MetricField:
    """Per-cell Hessian of a potential, symmetrized and eigen-clamped.

    ``source`` is a trained model or a field of values on ``grid``. Grid values
    support only ``finite-diff`` mode and use the grid spacing (one-sided second
    order stencils at the edges); models are differenced at spacing ``h``
    (default one grid spacing) around every cell center.
    """
    if h is not None and np.any(np.asarray(h, dtype=float) <= 0):
        raise DomainError(f"h must be positive, got {h}")
    if mode not in ('analytic', 'finite-diff'):
        raise DomainError(f"unknown Hessian mode {mode!r}")
    if isinstance(source, PotentialModel):
        if mode == 'analytic':
            raw = input_hessian(source, grid.points)
        else:
            hv = np.array(grid.spacing) if h is None else np.broadcast_to(np.asarray(h, dtype=float), (2,))
            raw = _model_stencil_hessian(source, grid.points, hv)
    else:
        if mode == 'analytic':
            raise DomainError('analytic Hessians need a model; use finite-diff for grid values')
        raw = _grid_stencil_hessian(values_on_grid(source, grid), grid)
    tensors, floor, raw_min = project_tensors(raw, eps_factor)
    result = MetricField(grid, tensors, floor, raw_min)
    if result.degenerate:
        logger.warning(f"metric is degenerate: every cell was clamped to the floor {floor:.3e}")
    return result


def min_eigenvalue_report(metric: MetricField) -> dict:
    """Convexity diagnostic of the field before clamping."""
    raw = metric.raw_min_eigenvalues
    if raw is None:
        raw = np.linalg.eigvalsh(metric.tensors)[:, 0]
    return {
        'min_raw_eigenvalue': float(raw.min()),
        'negative_fraction': float(np.mean(raw < 0)),
        'clamped_fraction': float(np.mean(raw < metric.floor)),
        'floor': float(metric.floor),
    }


def pullback_metric(table: FeatureTable, weighting: str = 'inverse-variance',
                    eps_factor: float = 1e-6) -> MetricField:
    """J^T W J of the mean-feature map, J from grid differences of the per-cell means."""
    grid = table.grid
    w = feature_weights(table, weighting)
    k = table.n_features
    J = np.empty((grid.n_cells, k, 2))
    for f in range(k):
        d1, d2 = np.gradient(table.means[:, f].reshape(grid.shape), grid.dx, grid.dy, edge_order=2)
        J[:, f, 0] = d1.ravel()
        J[:, f, 1] = d2.ravel()
    raw = np.einsum('nfa,f,nfb->nab', J, w, J)
    tensors, floor, raw_min = project_tensors(raw, eps_factor)
    return MetricField(grid, tensors, floor, raw_min)


# ---------------------------------------------------------------------------
# Interpolation
# ---------------------------------------------------------------------------

def _bilinear(values: np.ndarray, grid: ParamGrid, pts: np.ndarray):
    """Interpolate (nx, ny, ...) values at (m, 2) points; returns value and d/dt1, d/dt2."""
    p = np.atleast_2d(pts)
    u = np.clip((p[:, 0] - grid.t1[0]) / grid.dx, 0.0, grid.nx - 1)
    w = np.clip((p[:, 1] - grid.t2[0]) / grid.dy, 0.0, grid.ny - 1)
    i0 = np.minimum(np.floor(u).astype(int), grid.nx - 2)
    j0 = np.minimum(np.floor(w).astype(int), grid.ny - 2)
    fu = u - i0
    fw = w - j0
    inside_u = ((p[:, 0] > grid.t1[0]) & (p[:, 0] < grid.t1[-1])).astype(float)
    inside_w = ((p[:, 1] > grid.t2[0]) & (p[:, 1] < grid.t2[-1])).astype(float)
    extra = (slice(None),) + (None,) * (values.ndim - 2)
    fu_, fw_ = fu[extra], fw[extra]
    v00 = values[i0, j0]
    v10 = values[i0 + 1, j0]
    v01 = values[i0, j0 + 1]
    v11 = values[i0 + 1, j0 + 1]
    val = (1 - fu_) * (1 - fw_) * v00 + fu_ * (1 - fw_) * v10 + (1 - fu_) * fw_ * v01 + fu_ * fw_ * v11
    d1 = ((1 - fw_) * (v10 - v00) + fw_ * (v11 - v01)) / grid.dx * inside_u[extra]
    d2 = ((1 - fu_) * (v01 - v00) + fu_ * (v11 - v10)) / grid.dy * inside_w[extra]
    return val, d1, d2


def _check_inside(grid: ParamGrid, pts: np.ndarray):
    for p in np.atleast_2d(pts):
        if not grid.contains(p):
            raise DomainError(f"point {tuple(p)} lies outside the grid bounds {grid.bounds}")


def metric_at(metric: MetricField, point) -> np.ndarray:
    p = np.asarray(point, dtype=float)
    _check_inside(metric.grid, p)
    G, _, _ = _bilinear(metric.tensors.reshape(metric.grid.nx, metric.grid.ny, 2, 2), metric.grid, p)
    G = 0.5 * (G[0] + G[0].T)
    w, V = np.linalg.eigh(G)
    if w[0] < metric.floor:
        G = V @ np.diag(np.maximum(w, metric.floor)) @ V.T
    return G


def _metric_with_gradient(metric: MetricField, pts: np.ndarray):
    return _bilinear(metric.tensors.reshape(metric.grid.nx, metric.grid.ny, 2, 2), metric.grid, pts)


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------

def linear_path(a, b, n_points: int) -> np.ndarray:
    if n_points < 2:
        raise DomainError('a path needs at least two points')
    s = np.linspace(0.0, 1.0, n_points)[:, None]
    pts = (1.0 - s) * np.asarray(a, dtype=float) + s * np.asarray(b, dtype=float)
    pts[0] = a
    pts[-1] = b
    return pts


def _as_points(path) -> np.ndarray:
    pts = path.points if isinstance(path, GeodesicPath) else path
    pts = np.asarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise DomainError(f"path must be an (m >= 2, 2) array, got {pts.shape}")
    return pts


def path_length(path, metric: MetricField) -> float:
    """Sum over segments of sqrt(d^T g(midpoint) d)."""
    pts = _as_points(path)
    d = np.diff(pts, axis=0)
    G, _, _ = _metric_with_gradient(metric, 0.5 * (pts[1:] + pts[:-1]))
    return float(np.sum(np.sqrt(np.maximum(np.einsum('ni,nij,nj->n', d, G, d), 0.0))))


def path_energy(pts: np.ndarray, metric: MetricField) -> Tuple[float, np.ndarray]:
    """Discrete energy sum d^T g(mid) d and its gradient with respect to every point."""
    d = np.diff(pts, axis=0)
    G, G1, G2 = _metric_with_gradient(metric, 0.5 * (pts[1:] + pts[:-1]))
    Gd = np.einsum('nij,nj->ni', G, d)
    energy = float(np.sum(d * Gd))
    dmid = np.column_stack([np.einsum('ni,nij,nj->n', d, G1, d), np.einsum('ni,nij,nj->n', d, G2, d)])
    grad = np.zeros_like(pts)
    grad[1:] += 2.0 * Gd + 0.5 * dmid
    grad[:-1] += -2.0 * Gd + 0.5 * dmid
    return energy, grad


def geodesic(metric: MetricField, a, b, n_points: int = 32, iterations: int = 2000,
             learning_rate: float = 1e-2, tol: float = 1e-10) -> GeodesicPath:
    """Minimize path energy over the interior points with Adam, starting from the straight segment.

    The returned path is the shortest seen during optimization, so its length never
    exceeds the straight segment's.
    """
    grid = metric.grid
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_inside(grid, np.vstack([a, b]))
    if n_points < 3:
        raise DomainError(f"n_points must be at least 3, got {n_points}")
    lo = np.array([grid.bounds[0], grid.bounds[2]])
    hi = np.array([grid.bounds[1], grid.bounds[3]])

    pts = linear_path(a, b, n_points)
    straight = path_length(pts, metric)
    best_pts, best_len = pts.copy(), straight
    opt = Adam(2 * (n_points - 2), learning_rate)
    interior = pts[1:-1].ravel()
    history = []
    converged = False
    for it in range(iterations):
        energy, grad = path_energy(pts, metric)
        history.append(energy)
        length = path_length(pts, metric)
        if length < best_len:
            best_pts, best_len = pts.copy(), length
        if it >= 100 and abs(history[-101] - energy) <= tol * max(abs(energy), 1e-300):
            converged = True
            break
        # cosine-annealed step size
        opt.learning_rate = learning_rate * max(0.5 * (1.0 + np.cos(np.pi * it / iterations)), 1e-3)
        interior = opt.step(interior, grad[1:-1].ravel())
        interior = np.clip(interior.reshape(-1, 2), lo, hi).ravel()
        pts[1:-1] = interior.reshape(-1, 2)
    else:
        length = path_length(pts, metric)
        if length < best_len:
            best_pts, best_len = pts.copy(), length
    if not converged:
        logger.warning(f"geodesic {tuple(a)} -> {tuple(b)} did not converge in {iterations} iterations; "
                       f"returning best path found (length {best_len:.6g}, straight {straight:.6g})")
    return GeodesicPath(best_pts, best_len, straight, history, converged)


def path_curvature(path) -> float:
    """Mean turning angle at interior points divided by the mean segment length."""
    pts = _as_points(path)
    if pts.shape[0] < 3:
        raise DomainError('curvature needs at least three points')
    d = np.diff(pts, axis=0)
    seg = np.linalg.norm(d, axis=1)
    if np.any(seg == 0):
        raise DomainError('path has duplicate consecutive points')
    u, v = d[:-1], d[1:]
    cross = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
    dot = np.sum(u * v, axis=1)
    # collinear within rounding counts as exactly straight
    straight = (np.abs(cross) <= 1e-12 * seg[:-1] * seg[1:]) & (dot > 0)
    angles = np.where(straight, 0.0, np.arctan2(np.abs(cross), dot))
    return float(np.mean(angles) / np.mean(seg))


def feature_path_length(path, table: FeatureTable) -> float:
    """Cumulative Euclidean length of the path mapped through the interpolated mean features."""
    pts = _as_points(path)
    grid = table.grid
    f, _, _ = _bilinear(table.means.reshape(grid.nx, grid.ny, -1), grid, pts)
    return float(np.sum(np.linalg.norm(np.diff(f, axis=0), axis=1)))


def grid_shortest_path_length(metric: MetricField, a, b) -> float:
    """Dijkstra over cell centers with 16-neighbour edges weighted by the midpoint metric."""
    grid = metric.grid
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_inside(grid, np.vstack([a, b]))
    I, J = np.meshgrid(np.arange(grid.nx), np.arange(grid.ny), indexing='ij')
    pts = grid.points
    src, dst, wts = [], [], []
    for di, dj in GRAPH_OFFSETS:
        ok = (I + di >= 0) & (I + di < grid.nx) & (J + dj >= 0) & (J + dj < grid.ny)
        u = (I[ok] * grid.ny + J[ok])
        v = ((I[ok] + di) * grid.ny + J[ok] + dj)
        d = pts[v] - pts[u]
        G, _, _ = _metric_with_gradient(metric, 0.5 * (pts[u] + pts[v]))
        src.append(u)
        dst.append(v)
        wts.append(np.sqrt(np.einsum('ni,nij,nj->n', d, G, d)))
    graph = coo_matrix((np.concatenate(wts), (np.concatenate(src), np.concatenate(dst))),
                       shape=(grid.n_cells, grid.n_cells)).tocsr()
    ca, cb = grid.nearest(np.vstack([a, b]))
    dist = dijkstra(graph, directed=False, indices=int(ca))[int(cb)]
    lead = path_length(np.vstack([a, pts[ca]]), metric) if not np.allclose(a, pts[ca]) else 0.0
    tail = path_length(np.vstack([pts[cb], b]), metric) if not np.allclose(b, pts[cb]) else 0.0
    return float(dist + lead + tail)


# ---------------------------------------------------------------------------
# Phase map
# ---------------------------------------------------------------------------

def phase_map(metric: MetricField, quantile: float = 0.95) -> PhaseMap:
    """Frobenius norm of the discrete gradient of the tensor field; cells at or above the quantile are flagged."""
    if not 0 < quantile < 1:
        raise DomainError(f"quantile must lie in (0, 1), got {quantile}")
    grid = metric.grid
    T = metric.tensors.reshape(grid.nx, grid.ny, 4)
    total = np.zeros(grid.shape)
    for comp in range(4):
        d1, d2 = np.gradient(T[:, :, comp], grid.dx, grid.dy)
        total += d1 * d1 + d2 * d2
    values = np.sqrt(total).ravel()
    threshold = float(np.quantile(values, quantile))
    flags = (values >= threshold) & (values > 0)
    logger.info(f"phase map: {int(flags.sum())} of {grid.n_cells} cells flagged (threshold {threshold:.4g})")
    return PhaseMap(grid, values, flags, threshold)


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

METRIC_HEADER = ['i', 'j', 'g11', 'g12', 'g22']
PATH_HEADER = ['k', 't1', 't2']


def dump_metric(metric: MetricField, path):
    grid = metric.grid

    def rows():
        for c in range(grid.n_cells):
            i, j = divmod(c, grid.ny)
            g = metric.tensors[c]
            yield [i, j, g[0, 0], g[0, 1], g[1, 1]]

    write_csv(path, METRIC_HEADER, rows())
    write_json(sidecar_path(path), {**grid.sidecar(), 'floor': metric.floor})


def load_metric(path) -> MetricField:
    meta = read_json(sidecar_path(path))
    grid = grid_from_sidecar(meta)
    tensors = np.full((grid.n_cells, 2, 2), np.nan)
    _, rows = read_csv(path, lambda h: h == METRIC_HEADER, ','.join(METRIC_HEADER))
    for line_no, raw, (i, j, g11, g12, g22) in rows:
        if not (0 <= i < grid.nx and 0 <= j < grid.ny) or i != int(i) or j != int(j):
            raise SchemaError(path, line_no, raw, f"cell ({i}, {j}) outside a {grid.nx}x{grid.ny} grid")
        tensors[grid.index(i, j)] = [[g11, g12], [g12, g22]]
    if np.isnan(tensors).any():
        raise SchemaError(path, 0, '', 'metric file does not cover every cell')
    return MetricField(grid, tensors, float(meta.get('floor', FLOOR_MIN)),
                       np.linalg.eigvalsh(tensors)[:, 0])


def dump_path(points, path):
    pts = _as_points(points)
    write_csv(path, PATH_HEADER, ((k, p[0], p[1]) for k, p in enumerate(pts)))


def load_path(path) -> np.ndarray:
    _, rows = read_csv(path, lambda h: h == PATH_HEADER, ','.join(PATH_HEADER))
    pts = [v[1:] for _, _, v in rows]
    if len(pts) < 2:
        raise SchemaError(path, 0, '', 'a path needs at least two points')
    return np.array(pts)


def dump_phase_map(pm: PhaseMap, path):
    grid = pm.grid
    write_csv(path, ['i', 'j', 'value', 'boundary'],
              ([*divmod(c, grid.ny), pm.values[c], int(pm.flags[c])] for c in range(grid.n_cells)))
    write_json(sidecar_path(path), {**grid.sidecar(), 'threshold': pm.threshold})
