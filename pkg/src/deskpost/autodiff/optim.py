from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .tensor import Tensor


class AdamW:
    """Adam with decoupled weight decay.

    Decay is applied only to parameters with ``ndim >= 2`` (matrices and
    embeddings); gains and biases are left alone.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if self.weight_decay and p.data.ndim >= 2 and lr:
                p.data *= 1.0 - lr * self.weight_decay
            if p._grad is None:
                # no gradient reached this parameter; moments still decay
                m *= b1
                v *= b2
                continue
            g = p._grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr:
                p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p._grad is not None:
            total += float(np.sum(p._grad * p._grad))
    return math.sqrt(total)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float | None) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    params = list(params)
    norm = global_grad_norm(params)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p._grad is not None:
                p._grad *= scale
    return norm
