"""Learn logZ(t) from a posterior field by matching Bregman kernel rows.

For a convex potential v the kernel

    q[c'][c] ∝ exp(<t_c, ∇v(t_c')> - v(t_c))

is exp(-D_v(t_c, t_c')) up to a factor that depends on c' only, so each row
peaks at its own source cell. Training minimizes the mean over source cells of
the Jensen-Shannon divergence between the target posterior row and q[c'].
Source gradients ∇v(t_c') are held fixed inside each optimization step; only
the values v(t_c) carry parameter gradients.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Tuple, Union

import numpy as np
from scipy.special import logsumexp, xlogy

from .artifacts import read_csv, read_json, write_csv, write_json
from .errors import ConvergenceError, DomainError, SchemaError
from .models import ParamGrid, TrainConfig
from .network import Adam, Network
from .posterior import PosteriorField

logger = logging.getLogger(__name__)

LN2 = float(np.log(2.0))


@dataclass
class PotentialModel:
    network: Network
    bounds: Tuple[float, float, float, float]
    loss_history: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.network.sizes[0] != 2 or self.network.sizes[-1] != 1:
            raise DomainError(f"potential network must map 2 -> 1, got sizes {self.network.sizes}")

    @classmethod
    def init(cls, grid: ParamGrid, cfg: TrainConfig) -> 'PotentialModel':
        sizes = (2,) + (cfg.hidden,) * cfg.depth + (1,)
        return cls(Network.init(sizes, cfg.activation, cfg.seed), tuple(grid.bounds))

    @property
    def activation(self) -> str:
        return self.network.activation

    @property
    def _scale(self) -> np.ndarray:
        b = self.bounds
        return np.array([2.0 / (b[1] - b[0]), 2.0 / (b[3] - b[2])])

    def _normalize(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        lo = np.array([self.bounds[0], self.bounds[2]])
        return (p - lo) * self._scale - 1.0

    def values(self, points) -> np.ndarray:
        v = self.network.forward(self._normalize(points))[:, 0]
        if not np.all(np.isfinite(v)):
            raise ConvergenceError('potential is not finite on the requested points')
        return v

    def gradient(self, points) -> np.ndarray:
        return self.network.input_jacobian(self._normalize(points))[:, 0, :] * self._scale

    def param_backward(self, points, adjoints) -> np.ndarray:
        return self.network.backward(self._normalize(points), np.asarray(adjoints, dtype=float)[:, None])

    def copy(self) -> 'PotentialModel':
        return PotentialModel(self.network.copy(), self.bounds, list(self.loss_history))


@dataclass(frozen=True)
class ModelRowSet:
    grid: ParamGrid
    values: np.ndarray
    gradients: np.ndarray
    log_rows: np.ndarray

    @property
    def rows(self) -> np.ndarray:
        return np.exp(self.log_rows)

    @property
    def masses(self) -> np.ndarray:
        return np.exp(self.log_rows) * self.grid.cell_area


# ---------------------------------------------------------------------------
# Divergences
# ---------------------------------------------------------------------------

def _field(values, grid: ParamGrid) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.size != grid.n_cells:
        raise DomainError(f"field has {v.size} values, grid has {grid.n_cells} cells")
    return v.reshape(grid.shape)


def grid_gradient(values, grid: ParamGrid) -> np.ndarray:
    """(n_cells, 2) central-difference gradient; one-sided second order at the edges."""
    v = _field(values, grid)
    d1, d2 = np.gradient(v, grid.dx, grid.dy, edge_order=2)
    return np.column_stack([d1.ravel(), d2.ravel()])


def bregman(phi_values, grid: ParamGrid, t: int, t_src: int) -> float:
    """D_phi(t, t') = phi(t) - phi(t') - <∇phi(t'), t - t'> for cells ``t`` and ``t_src``."""
    phi = _field(phi_values, grid).ravel()
    i, j = divmod(int(t_src), grid.ny)
    if i in (0, grid.nx - 1) or j in (0, grid.ny - 1):
        logger.warning(f"source cell {t_src} lies on the grid boundary; gradient uses one-sided differences")
    g = grid_gradient(phi, grid)[t_src]
    diff = grid.center(t) - grid.center(t_src)
    return float(phi[t] - phi[t_src] - g @ diff)


def bregman_matrix(phi_values, grid: ParamGrid) -> np.ndarray:
    """D[c', c] = D_phi(t_c, t_c') for every pair of cells."""
    phi = _field(phi_values, grid).ravel()
    g = grid_gradient(phi, grid)
    pts = grid.points
    return phi[None, :] - phi[:, None] - (g @ pts.T - np.sum(g * pts, axis=1)[:, None])


def jsd(p, q, cell_area: float = 1.0):
    """Jensen-Shannon divergence (natural log) between rows of p and q along the last axis.

    Rows are densities normalized with ``cell_area``; pass 1.0 for probability vectors.
    """
    p = np.asarray(p, dtype=float) * cell_area
    q = np.asarray(q, dtype=float) * cell_area
    if p.shape != q.shape:
        raise DomainError(f"rows differ in shape: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise DomainError('negative density in JSD input')
    m = 0.5 * (p + q)
    with np.errstate(divide='ignore', invalid='ignore'):
        kl_p = np.sum(xlogy(p, p) - xlogy(p, m), axis=-1)
        kl_q = np.sum(xlogy(q, q) - xlogy(q, m), axis=-1)
    out = np.clip(0.5 * (kl_p + kl_q), 0.0, LN2)
    return float(out) if np.ndim(out) == 0 else out


def _resolve_h(grid: ParamGrid, h) -> np.ndarray:
    if h is None:
        return np.array(grid.spacing)
    h = np.broadcast_to(np.asarray(h, dtype=float), (2,))
    if np.any(h <= 0):
        raise DomainError(f"h must be positive, got {h}")
    return h


def kernel_rows(model: PotentialModel, grid: ParamGrid, h=None) -> ModelRowSet:
    """Normalized kernel rows of ``model`` on ``grid``; source gradients by central differences of spacing h."""
    hv = _resolve_h(grid, h)
    pts = grid.points
    values = model.values(pts)
    grads = np.empty_like(pts)
    for axis in range(2):
        step = np.zeros(2)
        step[axis] = hv[axis]
        grads[:, axis] = (model.values(pts + step) - model.values(pts - step)) / (2.0 * hv[axis])
    return rows_from_values(grid, values, grads)


def rows_from_values(grid: ParamGrid, values: np.ndarray, gradients: np.ndarray) -> ModelRowSet:
    logits = gradients @ grid.points.T - values[None, :]
    log_rows = logits - logsumexp(logits, axis=1, keepdims=True) - np.log(grid.cell_area)
    bad = ~np.all(np.isfinite(log_rows), axis=1)
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise ConvergenceError(f"kernel row {row} overflowed (source t={tuple(grid.center(row))})")
    return ModelRowSet(grid, values, gradients, log_rows)


def mse_bregman_loss(values_a, values_b, grid: ParamGrid) -> float:
    """∫∫ |exp(-D_a(t, t')) - exp(-D_b(t, t'))|^2 dt dt' on the grid."""
    diff = np.exp(-bregman_matrix(values_a, grid)) - np.exp(-bregman_matrix(values_b, grid))
    return float(np.sum(diff * diff) * grid.cell_area ** 2)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def jsd_loss_and_adjoints(target: PosteriorField, rows: ModelRowSet) -> Tuple[float, np.ndarray]:
    """Mean row JSD and dL/dv_c with the source gradients held constant."""
    p = target.masses
    q = rows.masses
    m = 0.5 * (p + q)
    losses = jsd(p, q)
    with np.errstate(divide='ignore', invalid='ignore'):
        a = np.where(q > 0, 0.5 * (np.log(q) - np.log(m)), 0.0)
    a_bar = np.sum(q * a, axis=1, keepdims=True)
    n_src = p.shape[0]
    # logits z = <t_c, g> - v_c, so dL/dv_c = -sum_c' dL/dz[c', c]
    adjoints = -np.sum(q * (a - a_bar), axis=0) / n_src
    return float(np.mean(losses)), adjoints


def param_gradient(model: PotentialModel, adjoints, points) -> np.ndarray:
    """Exact gradient of sum_c adjoints[c] * v(points[c]) with respect to the flat parameters."""
    adj = np.asarray(adjoints, dtype=float)
    if not np.all(np.isfinite(adj)):
        raise DomainError('adjoints must be finite')
    return model.param_backward(points, adj)


def trend_ok(history, window: int = 100, tol: float = 1e-9) -> bool:
    """True when the loss does not rise over any ``window``-iteration span."""
    h = np.asarray(history, dtype=float)
    if h.size <= window:
        return True
    return bool(np.all(h[window:] <= h[:-window] + tol))


def train_potential(target: PosteriorField, cfg: TrainConfig) -> PotentialModel:
    """Full-batch Adam on the mean JSD between target rows and model kernel rows."""
    grid = target.grid
    model = PotentialModel.init(grid, cfg)
    opt = Adam(model.network.n_params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    pts = grid.points
    params = model.network.get_flat()
    history = []
    logger.info(f"Training {model.network.sizes} {cfg.activation} network for {cfg.iterations} iterations")
    it = 0
    while True:
        rows = kernel_rows(model, grid, cfg.h)
        loss, adjoints = jsd_loss_and_adjoints(target, rows)
        if not np.isfinite(loss):
            raise ConvergenceError('loss became NaN', iteration=it)
        history.append(loss)
        if it % cfg.log_every == 0:
            logger.info(f"iter {it}: loss {loss:.6g}")
        if it >= cfg.iterations:
            break
        grad = param_gradient(model, adjoints, pts)
        params = opt.step(params, grad)
        if not np.all(np.isfinite(params)):
            raise ConvergenceError('parameter update produced non-finite values', iteration=it)
        model.network.set_flat(params)
        it += 1
    model.loss_history = history
    if not trend_ok(history):
        logger.warning('loss rose over at least one 100-iteration window')
    logger.info(f"Final loss {history[-1]:.6g} after {cfg.iterations} iterations")
    return model


def input_hessian(model: PotentialModel, points) -> np.ndarray:
    """Analytic (n, 2, 2) Hessian of the potential in t coordinates."""
    if model.activation != 'softplus':
        raise DomainError('analytic Hessian requires a smooth (softplus) activation')
    s = model._scale
    return model.network.input_hessian(model._normalize(points)) * np.outer(s, s)[None]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_model(model: PotentialModel, path):
    write_json(path, {'bounds': list(model.bounds), **model.network.to_dict()})


def load_model(path) -> PotentialModel:
    data = read_json(path)
    try:
        return PotentialModel(Network.from_dict(data), tuple(float(b) for b in data['bounds']))
    except (KeyError, ValueError, TypeError) as e:
        raise SchemaError(path, 0, '', f"invalid model checkpoint: {e}")


def dump_loss_history(history, path):
    write_csv(path, ['iter', 'loss'], ((i, float(l)) for i, l in enumerate(history)))


def load_loss_history(path) -> np.ndarray:
    _, rows = read_csv(path, lambda h: h == ['iter', 'loss'], 'iter,loss')
    return np.array([v[1] for _, _, v in rows])


def values_on_grid(source: Union[PotentialModel, np.ndarray], grid: ParamGrid) -> np.ndarray:
    if isinstance(source, PotentialModel):
        return source.values(grid.points)
    return _field(source, grid).ravel()
