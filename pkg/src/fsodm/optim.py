"""SGD with momentum and decoupled-from-loss L2 weight decay."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """One update per parameter: v <- m*v - lr*(g + wd*p); p <- p + v.

    Parameters without a gradient are left untouched. Gradients are consumed
    (reset to None) so the next accumulation starts from zero.
    """
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        if p.velocity is None:
            p.velocity = np.zeros_like(p.data)
        p.velocity *= momentum
        p.velocity -= lr * g
        p.data = p.data + p.velocity
        p.grad = None


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def grad_norm(params: Iterable[Parameter]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return float(np.sqrt(total))
