"""Adam optimizer, gradient clipping and spectral normalization."""

from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["AdamState", "adam_step", "clip_grad_norm", "SpectralState", "spectral_normalize"]


class AdamState:
    """Per-parameter first/second moment buffers plus a shared step counter."""

    def __init__(self, params: Sequence[Tensor], lr: float,
                 beta1: float = 0.0, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def adam_step(state: AdamState) -> None:
    """One bias-corrected Adam update on every parameter in the state."""
    for p in state.params:
        if p.grad is None:
            raise ValueError("adam_step: parameter has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(state.params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is <= max_norm.

    Returns the pre-clip norm.
    """
    if max_norm <= 0:
        raise ValueError("clip_grad_norm: max_norm must be positive")
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


class SpectralState:
    """Power-iteration vectors for one weight, kept at unit norm."""

    def __init__(self, weight_shape: tuple, rng: np.random.Generator):
        rows = weight_shape[0]
        cols = int(np.prod(weight_shape[1:]))
        self.u = _unit(rng.standard_normal(rows))
        self.v = _unit(rng.standard_normal(cols))


def _unit(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return x / (np.linalg.norm(x) + eps)


def spectral_normalize(weight: Tensor, state: SpectralState, update: bool = True) -> Tensor:
    """Divide a weight by its estimated spectral norm.

    One power iteration refreshes (u, v) when `update` is set; the estimate
    sigma is treated as a constant in backward. The weight is viewed as an
    (out-channels x rest) matrix.
    """
    w2d = weight.data.reshape(weight.shape[0], -1)
    if update:
        state.v = _unit(w2d.T @ state.u)
        state.u = _unit(w2d @ state.v)
    sigma = float(state.u @ w2d @ state.v)
    if sigma <= 1e-12:
        warnings.warn("spectral_normalize: singular value estimate ~0, clamping")
        sigma = 1e-12
    return weight * (1.0 / sigma)
