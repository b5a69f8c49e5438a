"""Per-cell feature statistics and grid posteriors p(t | x_1..x_N).

A PosteriorField row c' is the posterior density over cells for samples drawn at
the center of cell c'. Rows are densities: sum_c P[c'][c] * cell_area = 1. The
prior over the grid is uniform.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp
from tqdm import tqdm

from .artifacts import read_csv, read_json, sidecar_path, write_csv, write_json
from .errors import DomainError, SamplerError, SchemaError
from .models import ParamGrid, SamplerSpec, grid_from_sidecar
from .samplers import oracle_gradient, oracle_log_partition, oracle_stats, sample_features
from .utils import seed_for

logger = logging.getLogger(__name__)

ROW_TOLERANCE = 1e-12
# densities read back from CSV are renormalized after this looser check
FILE_ROW_TOLERANCE = 1e-9


@dataclass(frozen=True)
class FeatureTable:
    grid: ParamGrid
    means: np.ndarray
    variances: np.ndarray
    replicas: np.ndarray
    # per-cell (R_c, k) replica rows, kept for Mean-as-Stat and the oracle posterior
    samples: Optional[List[np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        n = self.grid.n_cells
        if self.means.ndim != 2 or self.means.shape[0] != n:
            raise DomainError(f"means must be ({n}, k), got {self.means.shape}")
        if self.variances.shape != self.means.shape:
            raise DomainError('variances must match means in shape')
        if np.any(self.variances < 0):
            raise DomainError('variances must be non-negative')
        if np.any(self.replicas < 1):
            raise DomainError('every cell needs at least one replica')

    @property
    def n_features(self) -> int:
        return self.means.shape[1]

    @classmethod
    def from_samples(cls, grid: ParamGrid, samples: List[np.ndarray]) -> 'FeatureTable':
        means, variances, counts = [], [], []
        for rows in samples:
            counts.append(rows.shape[0])
            means.append(rows.mean(axis=0))
            if rows.shape[0] > 1:
                variances.append(rows.var(axis=0, ddof=1))
            else:
                variances.append(np.zeros(rows.shape[1]))
        if min(counts) < 2:
            logger.warning('some cells have a single replica; their variances are set to zero')
        return cls(grid, np.array(means), np.array(variances), np.array(counts), samples)


@dataclass(frozen=True)
class PosteriorField:
    grid: ParamGrid
    log_rows: np.ndarray
    n_eff: float

    def __post_init__(self):
        n = self.grid.n_cells
        if self.log_rows.shape != (n, n):
            raise DomainError(f"posterior must be ({n}, {n}), got {self.log_rows.shape}")
        if np.any(np.isnan(self.log_rows)) or np.any(self.log_rows == np.inf):
            raise DomainError('posterior has non-finite entries')
        mass = np.exp(logsumexp(self.log_rows, axis=1)) * self.grid.cell_area
        worst = float(np.max(np.abs(mass - 1.0)))
        if worst > ROW_TOLERANCE:
            raise DomainError(f"posterior rows are not normalized (max deviation {worst:.3e})")

    @property
    def rows(self) -> np.ndarray:
        return np.exp(self.log_rows)

    @property
    def masses(self) -> np.ndarray:
        """Rows as probabilities over cells (density times cell area)."""
        return np.exp(self.log_rows) * self.grid.cell_area

    @classmethod
    def from_logits(cls, grid: ParamGrid, logits: np.ndarray, n_eff: float) -> 'PosteriorField':
        log_rows = logits - logsumexp(logits, axis=1, keepdims=True)
        # second pass removes the rounding left by the first
        log_rows = log_rows - logsumexp(log_rows, axis=1, keepdims=True) - np.log(grid.cell_area)
        return cls(grid, log_rows, float(n_eff))


# ---------------------------------------------------------------------------
# Feature tables
# ---------------------------------------------------------------------------

def build_feature_table(grid: ParamGrid, system: str, spec: SamplerSpec, replicas: int, seed: int,
                        threads: int = 1) -> FeatureTable:
    """Sample ``replicas`` independent microstates at every cell center and tabulate their features."""
    if replicas < 2:
        raise DomainError(f"replicas must be at least 2, got {replicas}")
    points = grid.points

    def _cell(c):
        try:
            return np.array([sample_features(system, points[c], spec, seed_for(seed, c, 'sample', r))
                             for r in range(replicas)])
        except Exception as e:
            raise SamplerError(c, points[c], str(e)) from e

    logger.info(f"Sampling {system} on {grid.nx}x{grid.ny} cells, {replicas} replicas each, {threads} threads")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        samples = list(tqdm(ex.map(_cell, range(grid.n_cells)), total=grid.n_cells,
                            desc='cells', disable=None))
    return FeatureTable.from_samples(grid, samples)


def dump_feature_table(table: FeatureTable, path):
    """Feature CSV ``t1,t2,f0..f{k-1}``: one row per replica (or per cell when only means exist)."""
    k = table.n_features
    header = ['t1', 't2'] + [f"f{i}" for i in range(k)]
    points = table.grid.points

    def rows():
        for c in range(table.grid.n_cells):
            block = table.samples[c] if table.samples is not None else table.means[c:c + 1]
            for r in block:
                yield [points[c, 0], points[c, 1], *r]

    write_csv(path, header, rows())
    write_json(sidecar_path(path), {'grid': table.grid.sidecar(), 'n_features': k})


def _feature_header(header):
    if len(header) < 3 or header[:2] != ['t1', 't2']:
        return False
    return header[2:] == [f"f{i}" for i in range(len(header) - 2)]


def ingest_features(path, grid: Optional[ParamGrid] = None) -> FeatureTable:
    """Load a feature CSV and group rows by nearest cell center.

    The grid comes from ``grid`` or, when omitted, from the JSON sidecar next to the file.
    """
    if grid is None:
        grid = grid_from_sidecar(read_json(sidecar_path(path))['grid'])
    _, rows = read_csv(path, _feature_header, 't1,t2,f0,...,f{k-1}')
    points, feats = [], []
    for _, raw, values in rows:
        if not grid.contains(values[:2], tol=0.5 * max(grid.dx, grid.dy)):
            logger.warning(f"{path}: row t=({values[0]}, {values[1]}) lies outside the grid; assigned to nearest cell")
        points.append(values[:2])
        feats.append(values[2:])
    if not feats:
        raise SchemaError(path, 2, '', 'no data rows')
    cells = grid.nearest(np.array(points))
    feats = np.array(feats)
    order = np.argsort(cells, kind='stable')
    counts = np.bincount(cells, minlength=grid.n_cells)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        listed = ', '.join(str(c) for c in missing[:20])
        more = '' if missing.size <= 20 else f" ... ({missing.size} total)"
        raise SchemaError(path, 0, '', f"cells without rows: {listed}{more}")
    split = np.split(feats[order], np.cumsum(counts)[:-1])
    # sort each cell's rows so the table does not depend on file order
    samples = [block[np.lexsort(block.T[::-1])] for block in split]
    return FeatureTable.from_samples(grid, samples)


# ---------------------------------------------------------------------------
# Posteriors
# ---------------------------------------------------------------------------

def feature_weights(table: FeatureTable, weighting: str) -> np.ndarray:
    """Per-feature weights: ones, or the inverse pooled within-cell variance."""
    k = table.n_features
    if weighting == 'uniform':
        return np.ones(k)
    if weighting != 'inverse-variance':
        raise DomainError(f"unknown weighting {weighting!r}")
    pooled = table.variances.mean(axis=0)
    spread = table.means.max(axis=0) - table.means.min(axis=0)
    w = np.empty(k)
    for i in range(k):
        floor = 1e-8 * spread[i] ** 2
        if pooled[i] > floor and pooled[i] > 0:
            w[i] = 1.0 / pooled[i]
        elif spread[i] > 0:
            w[i] = 1.0 / floor
            logger.warning(f"feature f{i} has (near) zero variance; weight clamped to {w[i]:.3e}")
        else:
            w[i] = 0.0
            logger.warning(f"feature f{i} is constant across cells; weight set to zero")
    return w


def _weighted_distances(table: FeatureTable, weighting: str) -> np.ndarray:
    scaled = table.means * np.sqrt(feature_weights(table, weighting))
    return cdist(scaled, scaled, metric='sqeuclidean')


def default_n_eff(table: FeatureTable, weighting: str = 'inverse-variance') -> float:
    """Largest n_eff for which every row keeps at least 5 cells above 1% of its maximum."""
    d = _weighted_distances(table, weighting)
    fifth = np.partition(d, 4, axis=1)[:, 4]
    worst = float(fifth.max())
    if worst <= 0:
        logger.warning('features do not separate cells; using n_eff=1')
        return 1.0
    return 2.0 * np.log(100.0) / worst


def posterior_from_features(table: FeatureTable, n_eff: float,
                            weighting: str = 'inverse-variance') -> PosteriorField:
    """P[c'][c] ∝ exp(-(n_eff/2) Σ_k w_k (μ_k(t_c) - μ_k(t_c'))^2) under a uniform prior."""
    if not n_eff > 0:
        raise DomainError(f"n_eff must be positive, got {n_eff}")
    d = _weighted_distances(table, weighting)
    return PosteriorField.from_logits(table.grid, -0.5 * n_eff * d, n_eff)


def oracle_posterior_from_stats(grid: ParamGrid, stat_sums: np.ndarray, n_samples, n_spins: int) -> PosteriorField:
    """Exact posterior exp(<t_c, Σ_i f(x_i)> - N logZ(t_c)) for the independent-spin oracle."""
    stat_sums = np.asarray(stat_sums, dtype=float)
    n = np.broadcast_to(np.asarray(n_samples, dtype=float), (grid.n_cells,))
    pts = grid.points
    logz = oracle_log_partition(pts, n_spins)
    logits = stat_sums @ pts.T - n[:, None] * logz[None, :]
    return PosteriorField.from_logits(grid, logits, float(n.max()))


def oracle_posterior(grid: ParamGrid, samples: Sequence[np.ndarray], n_spins: int) -> PosteriorField:
    """Exact posterior from raw oracle microstates; ``samples[c']`` is an (N, n_spins) array."""
    if len(samples) != grid.n_cells:
        raise DomainError(f"need one sample block per cell ({grid.n_cells}), got {len(samples)}")
    sums = np.zeros((grid.n_cells, 2))
    counts = np.zeros(grid.n_cells)
    for c, block in enumerate(samples):
        block = np.asarray(block).reshape(-1, n_spins)
        counts[c] = block.shape[0]
        if block.shape[0]:
            sums[c] = oracle_stats(block).sum(axis=0)
    return oracle_posterior_from_stats(grid, sums, counts, n_spins)


def oracle_posterior_from_table(table: FeatureTable, n_spins: int) -> PosteriorField:
    if table.samples is None:
        raise DomainError('oracle posterior needs per-replica block sums')
    sums = np.array([s.sum(axis=0) for s in table.samples])
    return oracle_posterior_from_stats(table.grid, sums, table.replicas, n_spins)


def smoothed_target(grid: ParamGrid, sigma: float) -> PosteriorField:
    """Gaussian target rows ∝ exp(-|t - t'|^2 / (2 sigma^2)), normalized on the grid."""
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    pts = grid.points
    return PosteriorField.from_logits(grid, -cdist(pts, pts, 'sqeuclidean') / (2.0 * sigma ** 2), 1.0)


def tempered_rows(field: PosteriorField, n: float) -> np.ndarray:
    """Rows of P^{1/n}, each rescaled so its maximum is 1."""
    if not n > 0:
        raise DomainError(f"n must be positive, got {n}")
    scaled = field.log_rows / n
    return np.exp(scaled - scaled.max(axis=1, keepdims=True))


def oracle_kl_rows(grid: ParamGrid, n_spins: int) -> np.ndarray:
    """exp(-KL(p_t' || p_t)) for source t' (rows) and target t (columns)."""
    pts = grid.points
    logz = oracle_log_partition(pts, n_spins)
    grad = oracle_gradient(pts, n_spins)
    kl = logz[None, :] - logz[:, None] - (grad @ pts.T - np.sum(grad * pts, axis=1)[:, None])
    return np.exp(-np.maximum(kl, 0.0))


# ---------------------------------------------------------------------------
# Posterior artifacts
# ---------------------------------------------------------------------------

def dump_posterior(field: PosteriorField, path):
    n = field.grid.n_cells
    dens = field.rows
    write_csv(path, ['row_index', 'col_index', 'density'],
              ((r, c, dens[r, c]) for r in range(n) for c in range(n)))
    write_json(sidecar_path(path), {**field.grid.sidecar(), 'n_eff': field.n_eff})


def load_posterior(path) -> PosteriorField:
    meta = read_json(sidecar_path(path))
    grid = grid_from_sidecar(meta)
    n = grid.n_cells
    _, rows = read_csv(path, lambda h: h == ['row_index', 'col_index', 'density'], 'row_index,col_index,density')
    dens = np.full((n, n), np.nan)
    for line_no, raw, (r, c, d) in rows:
        if not (0 <= r < n and 0 <= c < n) or r != int(r) or c != int(c):
            raise SchemaError(path, line_no, raw, f"cell index out of range for {n} cells")
        if d < 0:
            raise SchemaError(path, line_no, raw, 'negative density')
        dens[int(r), int(c)] = d
    if np.isnan(dens).any():
        raise SchemaError(path, 0, '', 'posterior file does not cover every (row, col) pair')
    worst = float(np.max(np.abs(dens.sum(axis=1) * grid.cell_area - 1.0)))
    if worst > FILE_ROW_TOLERANCE:
        raise SchemaError(path, 0, '', f"posterior rows are not normalized (max deviation {worst:.3e})")
    with np.errstate(divide='ignore'):
        log_rows = np.log(dens)
    return PosteriorField.from_logits(grid, log_rows, float(meta['n_eff']))
