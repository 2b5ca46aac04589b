"""Central finite-difference gradient checking (run under float64)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

ABS_FLOOR = 1e-7


def numerical_grad(f: Callable[[], Tensor], t: Tensor, step: float = 1e-5,
                   entries: np.ndarray | None = None) -> np.ndarray:
    """d f() / d t by central differences, perturbing ``t.data`` in place.

    ``entries`` restricts the estimate to those flat indices (others stay 0).
    """
    if not t.data.flags.c_contiguous:
        t.data = np.ascontiguousarray(t.data)   # reshape must return a view
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size) if entries is None else entries:
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().data.sum())
            flat[i] = orig - step
            down = float(f().data.sum())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    """Largest |a - n| / max(|a|, |n|) over entries whose absolute gap exceeds ``floor``."""
    gap = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    counted = gap > floor
    if not counted.any():
        return 0.0
    return float((gap[counted] / scale[counted]).max())


def check_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
                    max_entries: int | None = None, seed: int = 0) -> float:
    """Backpropagate the scalar ``f()`` and compare against finite differences.

    With ``max_entries`` each input is probed at that many random flat
    indices instead of every entry. Returns the worst relative error.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("gradient checks need float64 tensors")
        t.grad = None
    loss = f()
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        entries = None
        if max_entries is not None and t.size > max_entries:
            entries = np.sort(rng.choice(t.size, max_entries, replace=False))
        numeric = numerical_grad(f, t, step, entries)
        if entries is not None:
            analytic, numeric = analytic.reshape(-1)[entries], numeric.reshape(-1)[entries]
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst
