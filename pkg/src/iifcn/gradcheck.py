"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute deviation, relative to the largest gradient magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error over ``leaves`` between backprop and finite differences.

    ``loss_fn`` rebuilds the graph from the current leaf values each call.
    """
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.data)
    loss_fn().backward()
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad.copy()
        numeric = numerical_gradient(lambda: float(loss_fn().data), leaf.data, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
