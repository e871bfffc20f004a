"""First-order optimizers over dicts of numpy parameter arrays."""

from __future__ import annotations

import numpy as np


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if not max_norm:
        return grads
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


class Momentum:
    """Heavy-ball gradient descent with global-norm clipping."""

    def __init__(self, lr: float = 1e-3, momentum: float = 0.9, clip: float | None = 5.0):
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        grads = clip_by_global_norm(grads, self.clip)
        for name in sorted(grads):
            v = self.velocity.get(name)
            v = grads[name].copy() if v is None else self.momentum * v + grads[name]
            self.velocity[name] = v
            params[name] -= self.lr * v


class Adam:
    def __init__(
        self,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip: float | None = 5.0,
    ):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        grads = clip_by_global_norm(grads, self.clip)
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, lr: float, clip: float | None = 5.0, momentum: float = 0.9):
    if name == "momentum":
        return Momentum(lr=lr, momentum=momentum, clip=clip)
    if name == "adam":
        return Adam(lr=lr, clip=clip)
    raise ValueError(f"unknown optimizer {name!r}")
