"""SGD and Adam acting in place on leaf tensors."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


def _check(params: Sequence[Tensor], grads: Sequence[Tensor | np.ndarray]) -> list[np.ndarray]:
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    out = []
    for p, g in zip(params, grads):
        g = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} does not match param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
        out.append(g)
    return out


class SGD:
    kind = "sgd"

    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self, grads) -> None:
        for p, g in zip(self.params, _check(self.params, grads)):
            p.data = p.data - self.lr * g


class Adam:
    """Bias-corrected Adam with moments (0.9, 0.999) and epsilon 1e-8."""

    kind = "adam"

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads) -> None:
        grads = _check(self.params, grads)
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def opt_step(state, params: Sequence[Tensor], grads) -> list[Tensor]:
    """Apply one optimizer step; ``state`` must be bound to ``params``."""
    if list(state.params) != list(params):
        raise ValueError("optimizer state tracks a different parameter list")
    state.step(grads)
    return list(params)
