"""Central finite differences for checking hand-written gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5, max_entries: int | None = None,
                 rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Perturb ``x`` in place entry by entry; returns (flat indices, gradients).

    With ``max_entries`` only a random subset of entries is probed.
    """
    flat = x.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
    out = np.empty(len(idx))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        f_plus = f()
        flat[i] = old - eps
        f_minus = f()
        flat[i] = old
        out[k] = (f_plus - f_minus) / (2 * eps)
    return idx, out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|), over the whole array."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_param_grads(f: Callable[[], float], params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      eps: float = 1e-5, max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Relative error per parameter group."""
    rng = np.random.default_rng(seed)
    errors = {}
    for name in sorted(params):
        idx, num = numeric_grad(f, params[name], eps, max_entries, rng)
        errors[name] = relative_error(np.asarray(grads[name]).reshape(-1)[idx], num)
    return errors
