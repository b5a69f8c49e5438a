"""Fully connected networks with hand-derived derivatives.

``Network`` maps (n, sizes[0]) inputs to (n, sizes[-1]) outputs through
``len(sizes) - 2`` hidden layers. Besides the forward pass it provides

* reverse-mode gradients of ``sum(adjoint * output)`` with respect to every
  weight and bias,
* forward-mode input Jacobians and (for scalar outputs) input Hessians.

Softplus is twice differentiable; ReLU has zero second derivative almost
everywhere, so its input Hessian is identically zero.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .errors import DomainError

logger = logging.getLogger(__name__)

ACTIVATIONS = ('softplus', 'relu')


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == 'softplus':
        return np.logaddexp(0.0, z)
    return np.maximum(z, 0.0)


def _dact(name: str, z: np.ndarray) -> np.ndarray:
    if name == 'softplus':
        return expit(z)
    return (z > 0).astype(z.dtype)


def _d2act(name: str, z: np.ndarray) -> np.ndarray:
    if name == 'softplus':
        s = expit(z)
        return s * (1.0 - s)
    return np.zeros_like(z)


@dataclass
class Network:
    sizes: Tuple[int, ...]
    activation: str
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise DomainError('layer count does not match sizes')
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.sizes[l], self.sizes[l + 1]) or b.shape != (self.sizes[l + 1],):
                raise DomainError(f"layer {l} has shape {W.shape}/{b.shape}, "
                                  f"expected ({self.sizes[l]}, {self.sizes[l + 1]})")

    @classmethod
    def init(cls, sizes: Sequence[int], activation: str = 'softplus', seed: int = 0) -> 'Network':
        """He-style Gaussian weights, zero biases."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)))
            biases.append(np.zeros(n_out))
        return cls(tuple(sizes), activation, weights, biases)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    # --- parameters as one flat vector --------------------------------------

    def get_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])

    def set_flat(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise DomainError(f"expected {self.n_params} parameters, got {flat.shape}")
        pos = 0
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[l] = flat[pos:pos + W.size].reshape(W.shape).copy()
            pos += W.size
            self.biases[l] = flat[pos:pos + b.size].copy()
            pos += b.size

    def copy(self) -> 'Network':
        return Network(self.sizes, self.activation,
                       [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    # --- evaluation ---------------------------------------------------------

    def _forward(self, x: np.ndarray):
        a = np.atleast_2d(np.asarray(x, dtype=float))
        inputs, pre = [a], []
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            pre.append(z)
            a = z if l == self.n_layers - 1 else _act(self.activation, z)
            inputs.append(a)
        return inputs, pre

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self._forward(x)[0][-1]

    def backward(self, x: np.ndarray, adjoint: np.ndarray) -> np.ndarray:
        """Flat gradient of ``sum(adjoint * forward(x))`` with respect to the parameters."""
        inputs, pre = self._forward(x)
        delta = np.asarray(adjoint, dtype=float).reshape(inputs[-1].shape)
        grads = [None] * self.n_layers
        for l in range(self.n_layers - 1, -1, -1):
            if l < self.n_layers - 1:
                delta = delta * _dact(self.activation, pre[l])
            grads[l] = (inputs[l].T @ delta, delta.sum(axis=0))
            if l:
                delta = delta @ self.weights[l].T
        return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])

    def input_jacobian(self, x: np.ndarray) -> np.ndarray:
        """(n, n_out, n_in) derivatives of each output with respect to each input."""
        a = np.atleast_2d(np.asarray(x, dtype=float))
        J = np.broadcast_to(np.eye(self.sizes[0]), (a.shape[0], self.sizes[0], self.sizes[0]))
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            Jz = np.einsum('nki,km->nmi', J, W)
            if l == self.n_layers - 1:
                return Jz
            a = _act(self.activation, z)
            J = _dact(self.activation, z)[:, :, None] * Jz
        return J

    def input_hessian(self, x: np.ndarray) -> np.ndarray:
        """(n, n_in, n_in) second derivatives of a scalar output, propagated in forward mode."""
        if self.sizes[-1] != 1:
            raise DomainError('input Hessian is defined for scalar-output networks')
        a = np.atleast_2d(np.asarray(x, dtype=float))
        n, d = a.shape[0], self.sizes[0]
        J = np.broadcast_to(np.eye(d), (n, d, d))
        H = np.zeros((n, d, d, d))
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            Jz = np.einsum('nki,km->nmi', J, W)
            Hz = np.einsum('nkij,km->nmij', H, W)
            if l == self.n_layers - 1:
                return Hz[:, 0]
            s1 = _dact(self.activation, z)
            s2 = _d2act(self.activation, z)
            a = _act(self.activation, z)
            H = s2[:, :, None, None] * Jz[:, :, :, None] * Jz[:, :, None, :] + s1[:, :, None, None] * Hz
            J = s1[:, :, None] * Jz
        return H[:, 0]

    def to_dict(self) -> dict:
        return {
            'sizes': list(self.sizes),
            'activation': self.activation,
            'weights': [W.ravel().tolist() for W in self.weights],
            'biases': [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'Network':
        sizes = tuple(int(s) for s in data['sizes'])
        weights = [np.asarray(w, dtype=float).reshape(sizes[l], sizes[l + 1])
                   for l, w in enumerate(data['weights'])]
        biases = [np.asarray(b, dtype=float) for b in data['biases']]
        return cls(sizes, data['activation'], weights, biases)


@dataclass
class Adam:
    """Adam with bias-corrected moments over a flat parameter vector."""
    n_params: int
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DomainError('learning rate must be positive')
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise DomainError('Adam betas must lie in [0, 1)')
        if self.m is None:
            self.m = np.zeros(self.n_params)
        if self.v is None:
            self.v = np.zeros(self.n_params)

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.step_count += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.step_count)
        v_hat = self.v / (1.0 - self.beta2 ** self.step_count)
        return params - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
