"""Central finite-difference gradient checks in float64."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, precision


def numerical_grad(fn: Callable[[], Tensor], target: Tensor, step: float = 1e-4, index=None) -> np.ndarray:
    """d fn() / d target by central differences.

    ``index`` optionally restricts the probe to a subset of flat positions;
    other entries of the returned array are left at zero.
    """
    flat = target.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    positions = range(flat.size) if index is None else np.asarray(index).reshape(-1)
    for i in positions:
        orig = flat[i]
        flat[i] = orig + step
        plus = float(fn().data)
        flat[i] = orig - step
        minus = float(fn().data)
        flat[i] = orig
        grad[i] = (plus - minus) / (2 * step)
    return grad.reshape(target.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-4,
    max_probes: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error between backprop and finite differences over ``inputs``.

    Must be called under float64 precision with float64 inputs.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise TypeError("gradient checks require float64 tensors")
        t.grad = None
    with precision(np.float64):
        loss = fn()
        loss.backward()
        rng = np.random.default_rng(seed)
        worst = 0.0
        for t in inputs:
            analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
            index = None
            if max_probes is not None and t.size > max_probes:
                index = rng.choice(t.size, size=max_probes, replace=False)
            numeric = numerical_grad(fn, t, step, index)
            if index is not None:
                analytic = analytic.reshape(-1)[index]
                numeric = numeric.reshape(-1)[index]
            worst = max(worst, relative_error(analytic, numeric))
            t.grad = None
    return worst
