from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn: Callable[[], float], arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of ``fn()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(num / den)


def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
              eps: float = 1e-6) -> list[float]:
    """Compare analytic and central-difference gradients of ``loss_fn``.

    Returns one relative error per parameter (norm-wise).
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    def scalar() -> float:
        return float(loss_fn().data)

    errors = []
    for p, g in zip(params, analytic):
        errors.append(relative_error(g, numerical_grad(scalar, p.data, eps)))
    return errors
