"""Microstate samplers: 2-D Ising (Glauber heat bath), open-boundary TASEP, and the
independent-spin oracle whose log-partition function is known in closed form.

Ising sign convention: p(s | T, H) ∝ exp((1/T) (Σ_<ij> s_i s_j + H Σ_i s_i)), the
ferromagnetic form. It is the convention under which the model orders below
T_c ≈ 2.269 with non-zero mean spin.

The Monte Carlo kernels are numba-compiled with ``nogil`` so the per-cell thread
pool runs them in parallel. Each kernel seeds numba's thread-local generator on
entry, which makes a call a pure function of (params, seed).
"""
import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DomainError
from .models import SamplerParams, SamplerSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IsingState:
    spins: np.ndarray

    def __post_init__(self):
        s = self.spins
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise DomainError(f"Ising lattice must be square, got shape {s.shape}")
        if s.shape[0] < 2:
            raise DomainError('Ising lattice side must be at least 2')
        if not np.all(np.abs(s) == 1):
            raise DomainError('Ising spins must be +1 or -1')

    @property
    def side(self) -> int:
        return self.spins.shape[0]


@dataclass(frozen=True)
class TasepState:
    occupancy: np.ndarray

    def __post_init__(self):
        o = self.occupancy
        if o.ndim != 1 or o.shape[0] < 2:
            raise DomainError('TASEP lattice needs at least 2 sites')
        if not np.all((o == 0) | (o == 1)):
            raise DomainError('TASEP occupancy must be 0 or 1')

    @property
    def sites(self) -> int:
        return self.occupancy.shape[0]


# ---------------------------------------------------------------------------
# Ising
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _flip_probability(x):
    # heat bath: 1 / (1 + exp(x)), evaluated without overflow
    if x > 0.0:
        e = np.exp(-x)
        return e / (1.0 + e)
    return 1.0 / (1.0 + np.exp(x))


@njit(cache=True, nogil=True)
def _glauber(side, beta, field, n_sweeps, seed):
    np.random.seed(seed)
    spins = np.empty((side, side), dtype=np.int8)
    for i in range(side):
        for j in range(side):
            spins[i, j] = 1 if np.random.random() < 0.5 else -1
    n = side * side
    for _ in range(n_sweeps * n):
        k = np.random.randint(0, n)
        i = k // side
        j = k % side
        s = spins[i, j]
        nn = (spins[(i + 1) % side, j] + spins[(i - 1) % side, j]
              + spins[i, (j + 1) % side] + spins[i, (j - 1) % side])
        x = 2.0 * s * (nn + field) * beta
        if np.random.random() < _flip_probability(x):
            spins[i, j] = -s
    return spins


@njit(cache=True, nogil=True)
def _glauber_trace(side, beta, field, n_steps, seed):
    # Same chain as _glauber but records the encoded lattice after every step.
    np.random.seed(seed)
    spins = np.empty((side, side), dtype=np.int8)
    for i in range(side):
        for j in range(side):
            spins[i, j] = 1 if np.random.random() < 0.5 else -1
    n = side * side
    codes = np.empty(n_steps, dtype=np.int64)
    for step in range(n_steps):
        k = np.random.randint(0, n)
        i = k // side
        j = k % side
        s = spins[i, j]
        nn = (spins[(i + 1) % side, j] + spins[(i - 1) % side, j]
              + spins[i, (j + 1) % side] + spins[i, (j - 1) % side])
        x = 2.0 * s * (nn + field) * beta
        if np.random.random() < _flip_probability(x):
            spins[i, j] = -s
        code = 0
        for q in range(n):
            if spins[q // side, q % side] > 0:
                code |= 1 << q
        codes[step] = code
    return codes


def _check_ising(params: SamplerParams, side: int):
    T = params.point[0]
    if not np.isfinite(T) or T <= 0:
        raise DomainError(f"Ising temperature must be positive, got T={T}")
    if not np.isfinite(params.point[1]):
        raise DomainError(f"Ising field must be finite, got H={params.point[1]}")
    if side < 2:
        raise DomainError(f"Ising lattice side must be at least 2, got {side}")


def ising_sample(params: SamplerParams, side: int) -> IsingState:
    """Equilibrate a random L x L lattice with ``params.sweeps`` heat-bath sweeps at (T, H)."""
    _check_ising(params, side)
    T, H = params.point
    spins = _glauber(int(side), 1.0 / T, float(H), int(params.sweeps), _kernel_seed(params.seed))
    return IsingState(spins)


def ising_chain_codes(params: SamplerParams, side: int, steps: int) -> np.ndarray:
    """Encoded lattice after each of ``steps`` single-spin updates (bit q set when spin q is up)."""
    _check_ising(params, side)
    if side * side > 62:
        raise DomainError('state encoding only supports lattices with at most 62 spins')
    T, H = params.point
    return _glauber_trace(int(side), 1.0 / T, float(H), int(steps), _kernel_seed(params.seed))


def ising_stats(state: IsingState):
    """(e, m): bond sum over all 2 L^2 periodic bonds and spin sum, both per site."""
    s = state.spins.astype(np.int64)
    n = s.size
    bonds = np.sum(s * np.roll(s, -1, axis=0)) + np.sum(s * np.roll(s, -1, axis=1))
    return float(bonds) / n, float(np.sum(s)) / n


def ising_boltzmann(T: float, H: float, side: int = 2) -> np.ndarray:
    """Exact Boltzmann probabilities of every lattice, indexed like ``ising_chain_codes``."""
    n = side * side
    if n > 20:
        raise DomainError('exact enumeration is limited to 20 spins')
    probs = np.empty(1 << n)
    for code in range(1 << n):
        bits = np.array([(code >> q) & 1 for q in range(n)])
        e, m = ising_stats(IsingState((2 * bits - 1).reshape(side, side).astype(np.int8)))
        probs[code] = n * (e + H * m) / T
    probs = np.exp(probs - probs.max())
    return probs / probs.sum()


# ---------------------------------------------------------------------------
# TASEP
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _tasep(sites, alpha, beta, attempts, seed):
    np.random.seed(seed)
    occ = np.empty(sites, dtype=np.int8)
    for k in range(sites):
        occ[k] = 1 if np.random.random() < 0.5 else 0
    # action 0: entry at site 0, action `sites`: exit at the last site,
    # action a in 1..sites-1: hop across bond (a-1, a)
    for _ in range(attempts):
        a = np.random.randint(0, sites + 1)
        if a == 0:
            if occ[0] == 0 and np.random.random() < alpha:
                occ[0] = 1
        elif a == sites:
            if occ[sites - 1] == 1 and np.random.random() < beta:
                occ[sites - 1] = 0
        elif occ[a - 1] == 1 and occ[a] == 0:
            occ[a - 1] = 0
            occ[a] = 1
    return occ


def _check_rates(alpha: float, beta: float):
    for name, v in (('alpha', alpha), ('beta', beta)):
        if not (0.0 < v <= 1.0):
            raise DomainError(f"TASEP rate {name} must lie in (0, 1], got {v}")


def tasep_sample(params: SamplerParams, sites: int, move_factor: float = 8.0) -> TasepState:
    """Random-sequential TASEP run of ``move_factor * sites**2`` move attempts from a random start."""
    alpha, beta = params.point
    _check_rates(alpha, beta)
    if sites < 2:
        raise DomainError(f"TASEP needs at least 2 sites, got {sites}")
    if move_factor < 8.0:
        raise DomainError(f"move_factor must be at least 8, got {move_factor}")
    attempts = int(np.ceil(move_factor * sites * sites))
    occ = _tasep(int(sites), float(alpha), float(beta), attempts, _kernel_seed(params.seed))
    return TasepState(occ)


def tasep_stats(state: TasepState, bins: int) -> np.ndarray:
    """Per-bin mean occupancy followed by the occupancy of the first and last site."""
    M = state.sites
    if bins < 1 or M % bins:
        raise DomainError(f"bins={bins} must divide sites={M}")
    occ = state.occupancy.astype(float)
    return np.concatenate([occ.reshape(bins, M // bins).mean(axis=1), [occ[0], occ[-1]]])


# ---------------------------------------------------------------------------
# Independent-spin oracle
# ---------------------------------------------------------------------------

def oracle_sample(params: SamplerParams, n_spins: int) -> np.ndarray:
    """Exact draw: spins in block k are independent with P(+1) = e^{h_k} / (e^{h_k} + e^{-h_k})."""
    if n_spins < 2 or n_spins % 2:
        raise DomainError(f"n_spins must be even and at least 2, got {n_spins}")
    h = np.asarray(params.point, dtype=float)
    if not np.all(np.isfinite(h)):
        raise DomainError(f"oracle fields must be finite, got {params.point}")
    rng = np.random.default_rng(params.seed)
    half = n_spins // 2
    p_up = 0.5 * (1.0 + np.tanh(np.repeat(h, half)))
    return np.where(rng.random(n_spins) < p_up, 1, -1).astype(np.int8)


def oracle_stats(spins: np.ndarray) -> np.ndarray:
    """Sufficient statistic f(x): the spin sum of each block."""
    x = np.asarray(spins)
    half = x.shape[-1] // 2
    return np.stack([x[..., :half].sum(axis=-1), x[..., half:].sum(axis=-1)], axis=-1).astype(float)


def _log_2cosh(h):
    a = np.abs(h)
    return a + np.log1p(np.exp(-2.0 * a))


def oracle_log_partition(points, n_spins: int) -> np.ndarray:
    """logZ(h1, h2) = (n/2) (ln 2cosh h1 + ln 2cosh h2) for each row of ``points``."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    return 0.5 * n_spins * (_log_2cosh(p[:, 0]) + _log_2cosh(p[:, 1]))


def oracle_gradient(points, n_spins: int) -> np.ndarray:
    p = np.atleast_2d(np.asarray(points, dtype=float))
    return 0.5 * n_spins * np.tanh(p)


def oracle_hessian(points, n_spins: int) -> np.ndarray:
    """diag((n/2) sech^2 h1, (n/2) sech^2 h2) as an (n, 2, 2) array."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.zeros((p.shape[0], 2, 2))
    sech2 = 1.0 / np.cosh(p) ** 2
    out[:, 0, 0] = 0.5 * n_spins * sech2[:, 0]
    out[:, 1, 1] = 0.5 * n_spins * sech2[:, 1]
    return out


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def _kernel_seed(seed: int) -> int:
    # numba's np.random.seed takes a 32-bit value
    return int(np.random.SeedSequence(int(seed)).generate_state(1, dtype=np.uint32)[0])


def sample_microstate(system: str, point, spec: SamplerSpec, seed: int):
    params = SamplerParams(point=tuple(point), sweeps=spec.sweeps, seed=seed)
    if system == 'ising':
        return ising_sample(params, spec.side)
    if system == 'tasep':
        return tasep_sample(params, spec.sites, spec.move_factor)
    if system == 'oracle':
        return oracle_sample(params, spec.n_spins)
    raise DomainError(f"no built-in sampler for system {system!r}")


def microstate_features(system: str, state, spec: SamplerSpec) -> np.ndarray:
    if system == 'ising':
        return np.array(ising_stats(state))
    if system == 'tasep':
        return tasep_stats(state, spec.bins)
    if system == 'oracle':
        return oracle_stats(state)
    raise DomainError(f"no built-in sampler for system {system!r}")


def sample_features(system: str, point, spec: SamplerSpec, seed: int) -> np.ndarray:
    """Draw one microstate at ``point`` and reduce it to its feature vector."""
    return microstate_features(system, sample_microstate(system, point, spec, seed), spec)


def dump_pgm(state, path):
    """Write a lattice as a plain PGM (P2) image: up spins / particles white."""
    if isinstance(state, IsingState):
        img = ((state.spins + 1) // 2).astype(int)
    elif isinstance(state, TasepState):
        img = state.occupancy.reshape(1, -1).astype(int)
    else:
        raise DomainError(f"cannot render {type(state).__name__} as PGM")
    with open(path, 'w', encoding='ascii') as fh:
        fh.write(f"P2\n{img.shape[1]} {img.shape[0]}\n1\n")
        for row in img:
            fh.write(' '.join(str(v) for v in row) + '\n')
