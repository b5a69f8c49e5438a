"""Reference free energies, least-squares integration of derivative fields and
affine-invariant comparison of reconstructed potentials.

Ising references use the dimensionless log-partition per site,
F(T, H) = ln Z / L^2 = -f / T, so that

    dF/dT = -(<bonds> + H <spins>) / (L^2 T^2)      dF/dH = <spins> / (L^2 T)

are plain Monte Carlo averages.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import sparse
from scipy.sparse.linalg import cg

from .artifacts import read_csv, read_json, sidecar_path, write_csv, write_json
from .errors import ConvergenceError, DomainError, SchemaError
from .models import ParamGrid, SamplerSpec, TrainConfig, grid_from_sidecar
from .network import Adam, Network
from .posterior import FeatureTable, build_feature_table
from .samplers import oracle_gradient, oracle_log_partition

logger = logging.getLogger(__name__)

DERIVATIVE_KEYS = {
    'ising': ('dFdT', 'dFdH'),
    'tasep': ('dFdalpha', 'dFdbeta'),
    'oracle': ('dFdh1', 'dFdh2'),
    'external': ('dFdt1', 'dFdt2'),
}


@dataclass(frozen=True)
class ScalarField:
    grid: ParamGrid
    values: np.ndarray
    label: str = ''
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.size != self.grid.n_cells:
            raise DomainError(f"field '{self.label}' has {v.size} values for {self.grid.n_cells} cells")
        if not np.all(np.isfinite(v)):
            raise DomainError(f"field '{self.label}' has non-finite values")
        object.__setattr__(self, 'values', v.reshape(self.grid.shape))


@dataclass(frozen=True)
class AffineFit:
    s: float
    c1: float
    c2: float
    b: float
    rmse: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {'s': self.s, 'c1': self.c1, 'c2': self.c2, 'b': self.b, 'rmse': self.rmse,
                'degenerate': self.degenerate}


# ---------------------------------------------------------------------------
# Closed forms
# ---------------------------------------------------------------------------

def _check_rates(alpha, beta):
    a = np.asarray(alpha, dtype=float)
    b = np.asarray(beta, dtype=float)
    if np.any(~((a > 0) & (a <= 1))) or np.any(~((b > 0) & (b <= 1))):
        raise DomainError(f"TASEP rates must lie in (0, 1], got alpha={alpha}, beta={beta}")
    return a, b


def tasep_free_energy(alpha, beta):
    """Asymptotic current: 1/4 in the maximal-current phase, else x(1-x) for x = min-rate branch.

    Ties on alpha = beta < 1/2 take alpha(1 - alpha).
    """
    a, b = _check_rates(alpha, beta)
    out = np.where(np.minimum(a, b) >= 0.5, 0.25, np.where(a <= b, a * (1.0 - a), b * (1.0 - b)))
    return float(out) if out.ndim == 0 else out


def tasep_free_energy_gradient(alpha, beta) -> np.ndarray:
    """(dF/dalpha, dF/dbeta) on each branch; on the coexistence line the alpha branch is used."""
    a, b = _check_rates(alpha, beta)
    mc = np.minimum(a, b) >= 0.5
    low = ~mc & (a <= b)
    da = np.where(low, 1.0 - 2.0 * a, 0.0)
    db = np.where(~mc & ~low, 1.0 - 2.0 * b, 0.0)
    return np.stack([da, db], axis=-1)


def onsager_free_energy(T: float, order: int = 256) -> float:
    """Zero-field free energy per site of the square-lattice Ising model (J = 1).

    -F/T = ln 2 + (1/(2 pi^2)) ∫∫_[0,pi]^2 ln[cosh^2(2/T) - sinh(2/T)(cos θ1 + cos θ2)].
    Both axes use Gauss-Legendre nodes after θ = pi u^2, which clusters nodes at the
    θ = 0 corner where the integrand is nearly singular close to T_c.
    """
    if not np.isfinite(T) or T <= 0:
        raise DomainError(f"temperature must be positive, got T={T}")
    K = 1.0 / T
    u, w = leggauss(order)
    x = 0.5 * (u + 1.0)
    theta = np.pi * x * x
    weights = np.pi * w * x
    c = np.cos(theta)
    arg = np.cosh(2.0 * K) ** 2 - np.sinh(2.0 * K) * (c[:, None] + c[None, :])
    if np.any(arg <= 0) or not np.all(np.isfinite(arg)):
        raise ConvergenceError(f"Onsager integrand is not finite at T={T}; increase the quadrature order "
                               f"(now {order}) or move away from T_c")
    integral = float(weights @ np.log(arg) @ weights)
    log_z = np.log(2.0) + integral / (2.0 * np.pi ** 2)
    if not np.isfinite(log_z):
        raise ConvergenceError(f"Onsager quadrature diverged at T={T}; increase the order (now {order})")
    return float(-T * log_z)


def onsager_log_partition(T: float, order: int = 256) -> float:
    """ln Z per site at H = 0, i.e. -F/T."""
    return -onsager_free_energy(T, order) / T


def onsager_slice(grid: ParamGrid, order: int = 256) -> np.ndarray:
    """ln Z per site at H = 0 for every temperature column of the grid."""
    return np.array([onsager_log_partition(T, order) for T in grid.t1])


def onsager_energy_slice(grid: ParamGrid, step: float = 1e-4, order: int = 256) -> np.ndarray:
    """d(ln Z per site)/dT at H = 0 by central differences of the Onsager solution."""
    return np.array([(onsager_log_partition(T + step, order) - onsager_log_partition(T - step, order))
                     / (2.0 * step) for T in grid.t1])


# ---------------------------------------------------------------------------
# Integration and comparison
# ---------------------------------------------------------------------------

def discrete_gradient(F: ScalarField) -> Tuple[ScalarField, ScalarField]:
    """Central differences inside the grid, second-order one-sided at the edges."""
    d1, d2 = np.gradient(F.values, F.grid.dx, F.grid.dy, edge_order=2)
    return ScalarField(F.grid, d1, f"d{F.label}/dt1"), ScalarField(F.grid, d2, f"d{F.label}/dt2")


def _difference_matrix(n: int, h: float) -> sparse.csr_matrix:
    """The 1-D stencil of ``np.gradient(..., edge_order=2)`` as an n x n matrix."""
    D = sparse.lil_matrix((n, n))
    for k in range(1, n - 1):
        D[k, k - 1] = -1.0
        D[k, k + 1] = 1.0
    D[0, :3] = [-3.0, 4.0, -1.0]
    D[n - 1, n - 3:] = [1.0, -4.0, 3.0]
    return (D / (2.0 * h)).tocsr()


def gradient_operator(grid: ParamGrid) -> sparse.csr_matrix:
    """Sparse (2 n_cells, n_cells) matrix mapping flat F to the stacked ``discrete_gradient`` output."""
    Dx = sparse.kron(_difference_matrix(grid.nx, grid.dx), sparse.identity(grid.ny))
    Dy = sparse.kron(sparse.identity(grid.nx), _difference_matrix(grid.ny, grid.dy))
    return sparse.vstack([Dx, Dy]).tocsr()


def integrate_derivative_field(dT: ScalarField, dH: ScalarField, rtol: float = 1e-12,
                               maxiter: Optional[int] = None, label: str = 'F') -> ScalarField:
    """Least-squares F whose ``discrete_gradient`` best matches (dT, dH).

    The difference operator is the one ``discrete_gradient`` applies, so the
    round trip through it returns the original field up to a constant. The
    normal equations are solved by conjugate gradients and the gauge is fixed
    with F(cell 0) = 0. The RMS least-squares residual is returned in ``meta``.
    """
    if dT.grid != dH.grid:
        raise DomainError('derivative fields live on different grids')
    grid = dT.grid
    G = gradient_operator(grid)
    b = np.concatenate([dT.values.ravel(), dH.values.ravel()])
    rhs = G.T @ b
    if np.all(rhs == 0):
        sol = np.zeros(grid.n_cells)
    else:
        sol, info = cg(G.T @ G, rhs, rtol=rtol, atol=0.0, maxiter=maxiter or 20 * grid.n_cells)
        if info != 0:
            raise ConvergenceError(f"conjugate gradient did not reach rtol={rtol}", iteration=info)
    sol = sol - sol[0]
    r = G @ sol - b
    residual = float(np.sqrt(np.mean(r * r)))
    if residual > 1e-8:
        logger.info(f"derivative field is not a gradient; least-squares residual {residual:.3e}")
    return ScalarField(grid, sol.reshape(grid.shape), label, {'residual_rms': residual})


def affine_rmse(F_rec: ScalarField, F_gt: ScalarField) -> AffineFit:
    """Fit s*F_rec + c1*t1 + c2*t2 + b to F_gt by linear least squares."""
    if F_rec.grid != F_gt.grid:
        raise DomainError('fields live on different grids')
    T1, T2 = F_rec.grid.mesh
    base = np.column_stack([T1.ravel(), T2.ravel(), np.ones(F_rec.grid.n_cells)])
    f = F_rec.values.ravel()
    y = F_gt.values.ravel()
    coef_f, *_ = np.linalg.lstsq(base, f, rcond=None)
    spread = np.linalg.norm(f - base @ coef_f)
    degenerate = bool(spread <= 1e-10 * max(np.linalg.norm(f), 1.0))
    if degenerate:
        logger.warning(f"'{F_rec.label}' is affine on the grid; fitting with s = 0")
        c, *_ = np.linalg.lstsq(base, y, rcond=None)
        coef = np.concatenate([[0.0], c])
    else:
        coef, *_ = np.linalg.lstsq(np.column_stack([f, base]), y, rcond=None)
    pred = coef[0] * f + base @ coef[1:]
    rmse = float(np.sqrt(np.mean((pred - y) ** 2)))
    return AffineFit(float(coef[0]), float(coef[1]), float(coef[2]), float(coef[3]), rmse, degenerate)


def derivative_rmse(F_rec: ScalarField, reference: Tuple[ScalarField, ScalarField],
                    fit: AffineFit) -> Tuple[float, float]:
    """RMSE of s*dF_rec/dt_k + c_k against each reference derivative."""
    d1, d2 = discrete_gradient(F_rec)
    r1 = fit.s * d1.values + fit.c1 - reference[0].values
    r2 = fit.s * d2.values + fit.c2 - reference[1].values
    return float(np.sqrt(np.mean(r1 * r1))), float(np.sqrt(np.mean(r2 * r2)))


def evaluate_reconstruction(system: str, F_rec: ScalarField, F_gt: ScalarField,
                            reference: Tuple[ScalarField, ScalarField]) -> Dict[str, object]:
    """Affine-invariant F RMSE plus both derivative RMSEs for one reconstruction."""
    fit = affine_rmse(F_rec, F_gt)
    r1, r2 = derivative_rmse(F_rec, reference, fit)
    k1, k2 = DERIVATIVE_KEYS[system]
    return {'F_rmse': fit.rmse, f"{k1}_rmse": r1, f"{k2}_rmse": r2, 'affine': fit.to_dict()}


def hessian_relative_error(recovered: np.ndarray, analytic: np.ndarray) -> float:
    """Median per-cell relative Frobenius error after the best scalar rescaling of ``recovered``."""
    num = float(np.sum(recovered * analytic))
    den = float(np.sum(recovered * recovered))
    s = num / den if den > 0 else 0.0
    err = np.linalg.norm(s * recovered - analytic, axis=(1, 2)) / np.linalg.norm(analytic, axis=(1, 2))
    return float(np.median(err))


# ---------------------------------------------------------------------------
# Reference fields
# ---------------------------------------------------------------------------

def ising_reference_fields(grid: ParamGrid, spec: SamplerSpec, seed: int = 0, threads: int = 1,
                           table: Optional[FeatureTable] = None) -> Tuple[ScalarField, ScalarField]:
    """Monte Carlo dF/dT and dF/dH per cell, symmetrized in H when the grid is.

    ``table`` reuses an already sampled Ising feature table (features: bonds and
    spins per site) instead of sampling again.
    """
    if table is None:
        table = build_feature_table(grid, 'ising', spec, spec.replicas, seed, threads)
    T, H = grid.mesh
    b = table.means[:, 0].reshape(grid.shape)
    m = table.means[:, 1].reshape(grid.shape)
    if np.isclose(grid.bounds[2], -grid.bounds[3]):
        b = 0.5 * (b + b[:, ::-1])
        m = 0.5 * (m - m[:, ::-1])
    else:
        logger.warning('H range is not symmetric about 0; reference fields are not symmetrized')
    E = ScalarField(grid, -(b + H * m) / T ** 2, 'dF/dT')
    M = ScalarField(grid, m / T, 'dF/dH')
    return E, M


def reference_for(system: str, grid: ParamGrid, spec: SamplerSpec, table: Optional[FeatureTable] = None,
                  seed: int = 0, threads: int = 1):
    """(F_gt, (dF/dt1, dF/dt2)) for systems with a known reference, else None."""
    pts = grid.points
    if system == 'tasep':
        F = ScalarField(grid, tasep_free_energy(pts[:, 0], pts[:, 1]), 'F_TASEP')
        g = tasep_free_energy_gradient(pts[:, 0], pts[:, 1])
        return F, (ScalarField(grid, g[:, 0], 'dF/dalpha'), ScalarField(grid, g[:, 1], 'dF/dbeta'))
    if system == 'oracle':
        F = ScalarField(grid, oracle_log_partition(pts, spec.n_spins), 'logZ')
        g = oracle_gradient(pts, spec.n_spins)
        return F, (ScalarField(grid, g[:, 0], 'dF/dh1'), ScalarField(grid, g[:, 1], 'dF/dh2'))
    if system == 'ising':
        E, M = ising_reference_fields(grid, spec, seed, threads, table)
        return integrate_derivative_field(E, M, label='lnZ'), (E, M)
    return None


# ---------------------------------------------------------------------------
# Mean-as-Stat baseline
# ---------------------------------------------------------------------------

def mean_as_stat(table: FeatureTable, cfg: TrainConfig, iterations: Optional[int] = None,
                 batch_size: int = 4096) -> Tuple[ScalarField, ScalarField, ScalarField]:
    """Regress t on per-replica features, treat the per-cell mean prediction as dF/dt and integrate it."""
    if table.samples is None:
        raise DomainError('Mean-as-Stat needs per-replica feature rows')
    grid = table.grid
    X = np.concatenate(table.samples)
    cell = np.repeat(np.arange(grid.n_cells), table.replicas)
    Y = grid.normalize(grid.points)[cell]
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    degenerate = bool(np.all(np.ptp(table.means, axis=0) == 0))
    if degenerate:
        logger.warning('features are constant across cells; Mean-as-Stat predictions will be constant')
    Xs = (X - mu) / np.where(sd > 0, sd, 1.0)

    sizes = (X.shape[1],) + (cfg.hidden,) * cfg.depth + (2,)
    net = Network.init(sizes, cfg.activation, cfg.seed)
    opt = Adam(net.n_params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    params = net.get_flat()
    n_iter = cfg.iterations if iterations is None else iterations
    for it in range(n_iter):
        idx = rng.choice(X.shape[0], size=min(batch_size, X.shape[0]), replace=False)
        resid = net.forward(Xs[idx]) - Y[idx]
        loss = float(np.mean(np.sum(resid * resid, axis=1)))
        if not np.isfinite(loss):
            raise ConvergenceError('Mean-as-Stat regression diverged', iteration=it)
        if it % cfg.log_every == 0:
            logger.info(f"mean-as-stat iter {it}: mse {loss:.6g}")
        params = opt.step(params, net.backward(Xs[idx], 2.0 * resid / len(idx)))
        net.set_flat(params)

    pred = net.forward(Xs)
    per_cell = np.zeros((grid.n_cells, 2))
    np.add.at(per_cell, cell, pred)
    per_cell /= table.replicas[:, None]
    lo = np.array([grid.bounds[0], grid.bounds[2]])
    hi = np.array([grid.bounds[1], grid.bounds[3]])
    stat = lo + 0.5 * (per_cell + 1.0) * (hi - lo)
    sT = ScalarField(grid, stat[:, 0], 's_t1', {'degenerate': degenerate})
    sH = ScalarField(grid, stat[:, 1], 's_t2', {'degenerate': degenerate})
    F = integrate_derivative_field(sT, sH, label='F_mean_as_stat')
    F.meta['degenerate'] = degenerate
    return sT, sH, F


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def dump_scalar_field(F: ScalarField, path):
    grid = F.grid
    flat = F.values.ravel()
    write_csv(path, ['i', 'j', 'value'], ([*divmod(c, grid.ny), flat[c]] for c in range(grid.n_cells)))
    write_json(sidecar_path(path), {**grid.sidecar(), 'label': F.label})


def load_scalar_field(path) -> ScalarField:
    meta = read_json(sidecar_path(path))
    grid = grid_from_sidecar(meta)
    values = np.full(grid.n_cells, np.nan)
    _, rows = read_csv(path, lambda h: h[:3] == ['i', 'j', 'value'], 'i,j,value')
    for line_no, raw, v in rows:
        i, j = v[0], v[1]
        if not (0 <= i < grid.nx and 0 <= j < grid.ny) or i != int(i) or j != int(j):
            raise SchemaError(path, line_no, raw, f"cell ({i}, {j}) outside a {grid.nx}x{grid.ny} grid")
        values[grid.index(i, j)] = v[2]
    if np.isnan(values).any():
        raise SchemaError(path, 0, '', 'field file does not cover every cell')
    return ScalarField(grid, values, meta.get('label', ''))
