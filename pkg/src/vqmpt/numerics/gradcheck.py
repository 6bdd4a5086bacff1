"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], leaf: Tensor, eps: float = 1e-4) -> np.ndarray:
    """d fn() / d leaf by central differences; ``leaf.data`` is perturbed in place."""
    grad = np.zeros(leaf.data.shape, dtype=np.float64)
    flat = leaf.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn().data)
        flat[i] = orig - eps
        down = float(fn().data)
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a||, ||n||, floor)."""
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def gradcheck(fn: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Worst relative error between backprop and finite differences over ``leaves``.

    ``fn`` must rebuild the graph from the current leaf values on every call
    and return a scalar. Use float64 leaves; float32 cannot resolve ``eps``.
    """
    for leaf in leaves:
        leaf.grad = None
    fn().backward()
    worst = 0.0
    for leaf in leaves:
        analytic = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad.astype(np.float64)
        worst = max(worst, relative_error(analytic, numerical_grad(fn, leaf, eps)))
    return worst
