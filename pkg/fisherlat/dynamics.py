"""Probability-flow dynamics of a variance-preserving diffusion on a two-mode target.

The target is w+ N(+1, sigma^2) + w- N(-1, sigma^2). Under dx = -(beta/2) x dt +
sqrt(beta) dW the marginal at time t is the same mixture with means ±mu(t) and
variance sigma1^2(t). The reverse-time probability-flow velocity is

    v(x, t) = (beta/2) x + (beta/2) d/dx log p_t(x)

and its slope at the symmetric fixed point x = 0 is the Lyapunov exponent.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from .errors import DomainError, TrajectoryEscape

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-3


@dataclass(frozen=True)
class VpMixtureSpec:
    sigma: float
    beta: float = 1.0
    # weight of the +1 mode; 1.0 or 0.0 collapses the mixture to one Gaussian
    weight_plus: float = 0.5

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise DomainError(f"sigma must be positive, got {self.sigma}")
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise DomainError(f"beta must be positive, got {self.beta}")
        if not 0.0 <= self.weight_plus <= 1.0:
            raise DomainError(f"weight_plus must lie in [0, 1], got {self.weight_plus}")


def _check_time(t):
    if np.any(np.asarray(t) < 0):
        raise DomainError(f"time must be non-negative, got {t}")


def noised_density_params(spec: VpMixtureSpec, t: float) -> Tuple[float, float]:
    """(mu(t), sigma1^2(t)) = (e^{-beta t/2}, e^{-beta t} sigma^2 + 1 - e^{-beta t})."""
    _check_time(t)
    decay = np.exp(-spec.beta * t)
    return float(np.exp(-0.5 * spec.beta * t)), float(decay * spec.sigma ** 2 + 1.0 - decay)


def _mode_logits(spec: VpMixtureSpec, x, t):
    mu, var = noised_density_params(spec, t)
    x = np.asarray(x, dtype=float)
    with np.errstate(divide='ignore'):
        lw_plus = np.log(spec.weight_plus)
        lw_minus = np.log(1.0 - spec.weight_plus)
    return lw_plus - (x - mu) ** 2 / (2.0 * var), lw_minus - (x + mu) ** 2 / (2.0 * var), mu, var


def log_density(spec: VpMixtureSpec, x, t: float):
    lp, lm, _, var = _mode_logits(spec, x, t)
    out = logsumexp(np.stack([lp, lm]), axis=0) - 0.5 * np.log(2.0 * np.pi * var)
    return float(out) if np.ndim(out) == 0 else out


def score(spec: VpMixtureSpec, x, t: float):
    """d/dx log p_t(x) with the mode responsibilities computed from logit differences."""
    lp, lm, mu, var = _mode_logits(spec, x, t)
    with np.errstate(invalid='ignore'):
        r_plus = expit(lp - lm)
    x = np.asarray(x, dtype=float)
    out = (-x + mu * (2.0 * r_plus - 1.0)) / var
    return float(out) if np.ndim(out) == 0 else out


def reverse_velocity(spec: VpMixtureSpec, x, t: float):
    out = 0.5 * spec.beta * (np.asarray(x, dtype=float) + score(spec, x, t))
    return float(out) if np.ndim(out) == 0 else out


def lyapunov_closed(spec: VpMixtureSpec, t: float = 0.0) -> float:
    """(beta/2) (1 + (e^{-beta t} - sigma1^2) / sigma1^4); at t = 0 this is (beta/2)(1 + (1 - sigma^2)/sigma^4)."""
    _check_time(t)
    _, var = noised_density_params(spec, t)
    return float(0.5 * spec.beta * (1.0 + (np.exp(-spec.beta * t) - var) / var ** 2))


def lyapunov_numeric(spec: VpMixtureSpec, t: float = 0.0, delta: float = 1e-5) -> float:
    if not delta > 0:
        raise DomainError(f"delta must be positive, got {delta}")
    return (reverse_velocity(spec, delta, t) - reverse_velocity(spec, -delta, t)) / (2.0 * delta)


def _rk4(v: Callable, x: np.ndarray, tau: float, dtau: float, t_start: float) -> np.ndarray:
    # time runs backwards: velocity at tau is evaluated at forward time t_start - tau
    k1 = v(x, t_start - tau)
    k2 = v(x + 0.5 * dtau * k1, t_start - tau - 0.5 * dtau)
    k3 = v(x + 0.5 * dtau * k2, t_start - tau - 0.5 * dtau)
    k4 = v(x + dtau * k3, t_start - tau - dtau)
    return x + dtau / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def trajectory_pair(spec: VpMixtureSpec, x0: float, delta: float, t1: float, t0: float = 0.0,
                    steps: int = 1000, window: float = 10.0,
                    velocity: Optional[Callable] = None) -> np.ndarray:
    """Integrate x0 ± delta from forward time t1 down to t0 with fixed-step RK4.

    Returns rows (s, x_plus, x_minus) where s is the forward time. Leaving
    [-window, window] raises TrajectoryEscape carrying the rows computed so far.
    """
    if not t1 > t0 >= 0:
        raise DomainError(f"need t1 > t0 >= 0, got t1={t1}, t0={t0}")
    if steps < 1:
        raise DomainError('steps must be positive')
    if spec.sigma < SIGMA_FLOOR:
        logger.warning(f"sigma={spec.sigma} below {SIGMA_FLOOR}; trajectories use the floor")
        spec = VpMixtureSpec(SIGMA_FLOOR, spec.beta, spec.weight_plus)
    v = velocity or (lambda x, t: np.asarray(reverse_velocity(spec, x, max(t, 0.0))))
    dtau = (t1 - t0) / steps
    x = np.array([x0 + delta, x0 - delta], dtype=float)
    rows = np.empty((steps + 1, 3))
    rows[0] = (t1, x[0], x[1])
    for k in range(steps):
        x = _rk4(v, x, k * dtau, dtau, t1)
        rows[k + 1] = (t1 - (k + 1) * dtau, x[0], x[1])
        if not np.all(np.isfinite(x)) or np.any(np.abs(x) > window):
            raise TrajectoryEscape(f"trajectory left [-{window}, {window}] at s={rows[k + 1, 0]:.6g}",
                                   rows[:k + 2].copy())
    return rows


def trajectory_divergence(spec: VpMixtureSpec, x0: float = 0.0, delta: float = 1e-6, t1: float = 0.01,
                          t0: float = 0.0, steps: int = 1000, window: float = 10.0,
                          velocity: Optional[Callable] = None) -> float:
    """ln(|x_plus - x_minus| at t0 / (2 delta)) / (t1 - t0)."""
    rows = trajectory_pair(spec, x0, delta, t1, t0, steps, window, velocity)
    gap = abs(rows[-1, 1] - rows[-1, 2])
    return float(np.log(gap / (2.0 * delta)) / (t1 - t0))


def lyapunov_sweep(sigmas: Iterable[float], betas: Iterable[float], t: float = 0.0,
                   delta: float = 1e-5) -> List[Tuple[float, float, float, float, float]]:
    """Rows (sigma, beta, t, lambda_closed, lambda_numeric) over the product of both sweeps."""
    rows = []
    for sigma in sigmas:
        for beta in betas:
            spec = VpMixtureSpec(float(sigma), float(beta))
            rows.append((float(sigma), float(beta), float(t), lyapunov_closed(spec, t),
                         lyapunov_numeric(spec, t, delta)))
    return rows
