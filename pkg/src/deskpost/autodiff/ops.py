"""Differentiable operations.

Every function takes Tensors (or array-likes, treated as constants) and returns
a Tensor whose backward rule accumulates into the inputs that require grad.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, as_tensor, make_result

__all__ = [
    "add", "sub", "mul", "div", "neg", "power", "matmul", "sum", "mean",
    "exp", "log", "tanh", "relu", "gelu", "reshape", "transpose", "swapaxes",
    "index", "gather", "embedding", "concat", "where", "minimum", "maximum",
    "clip", "log_softmax", "softmax", "layer_norm", "cross_entropy",
]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _push(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t._accumulate(_unbroadcast(g, t.data.shape))


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        _push(a, g)
        _push(b, g)
    return make_result(a.data + b.data, (a, b), _bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        _push(a, g)
        _push(b, -g)
    return make_result(a.data - b.data, (a, b), _bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        if a.requires_grad:
            _push(a, g * b.data)
        if b.requires_grad:
            _push(b, g * a.data)
    return make_result(a.data * b.data, (a, b), _bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        if a.requires_grad:
            _push(a, g / b.data)
        if b.requires_grad:
            _push(b, -g * a.data / (b.data * b.data))
    return make_result(a.data / b.data, (a, b), _bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: _push(a, -g))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)

    def _bw(g):
        _push(a, g * exponent * a.data ** (exponent - 1))
    return make_result(a.data ** exponent, (a,), _bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: _push(a, g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_result(np.log(a.data), (a,), lambda g: _push(a, g / a.data))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: _push(a, g * (1.0 - out * out)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0
    return make_result(np.where(keep, a.data, 0.0), (a,), lambda g: _push(a, g * keep))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def _bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        _push(a, g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner))
    return make_result(out, (a,), _bw)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def _bw(g):
        _push(a, np.where(pick_a, g, 0.0))
        _push(b, np.where(pick_a, 0.0, g))
    return make_result(np.where(pick_a, a.data, b.data), (a, b), _bw)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data

    def _bw(g):
        _push(a, np.where(pick_a, g, 0.0))
        _push(b, np.where(pick_a, 0.0, g))
    return make_result(np.where(pick_a, a.data, b.data), (a, b), _bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; zero gradient where the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return make_result(np.clip(a.data, lo, hi), (a,), lambda g: _push(a, g * inside))


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def _bw(g):
        _push(a, np.where(cond, g, 0.0))
        _push(b, np.where(cond, 0.0, g))
    return make_result(np.where(cond, a.data, b.data), (a, b), _bw)


# -- linear algebra and reductions ----------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ValueError("matmul needs at least 1-d operands")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape} "
                         f"(inner dims {ka} != {kb})")
    if a.ndim == 1 or b.ndim == 1:
        raise ValueError("matmul expects matrices; reshape vectors to (1, n) or (n, 1)")

    def _bw(g):
        if a.requires_grad:
            _push(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _push(b, np.swapaxes(a.data, -1, -2) @ g)
    # contiguous operands keep BLAS results independent of the caller's strides
    out = np.ascontiguousarray(a.data) @ np.ascontiguousarray(b.data)
    return make_result(out, (a, b), _bw)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _push(a, np.broadcast_to(g, a.shape))
    return make_result(a.data.sum(axis=axes, keepdims=keepdims), (a,), _bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / max(n, 1))


# -- shape manipulation -----------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_result(a.data.reshape(shape), (a,), lambda g: _push(a, g.reshape(a.shape)))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_result(np.transpose(a.data, axes), (a,),
                       lambda g: _push(a, np.transpose(g, inv)))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return make_result(np.swapaxes(a.data, ax1, ax2), (a,),
                       lambda g: _push(a, np.swapaxes(g, ax1, ax2)))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(idx)

    def _bw(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        a._accumulate(full)
    return make_result(a.data[idx], (a,), _bw)


def gather(a, idx, axis: int = -1) -> Tensor:
    """``np.take_along_axis`` with a gradient (scatter-add)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def _bw(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        ax = axis % a.ndim
        # build open-mesh index for np.add.at
        grids = list(np.indices(idx.shape, sparse=True))
        grids[ax] = idx
        np.add.at(full, tuple(grids), g)
        a._accumulate(full)
    return make_result(out, (a,), _bw)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = weight.data[ids]

    def _bw(g):
        if not weight.requires_grad:
            return
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        weight._accumulate(full)
    return make_result(out, (weight,), _bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _push(t, piece)
    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, _bw)


# -- normalisation and probability -----------------------------------------

def log_softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted log-softmax; rejects non-finite input."""
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise FloatingPointError("log_softmax received NaN or Inf logits")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def _bw(g):
        _push(a, g - probs * g.sum(axis=axis, keepdims=True))
    return make_result(out, (a,), _bw)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax that tolerates ``-inf`` entries (used for attention masks)."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        _push(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))
    return make_result(out, (a,), _bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def _bw(g):
        _push(beta, g)
        _push(gamma, g * xhat)
        if x.requires_grad:
            gx = g * gamma.data
            d = x.shape[-1]
            dx = inv / d * (d * gx - gx.sum(axis=-1, keepdims=True)
                            - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
            x._accumulate(dx)
    return make_result(out, (x, gamma, beta), _bw)


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean next-token NLL over positions with ``mask == 1``.

    ``logits`` is ``[..., T, V]`` and ``targets`` ``[..., T]``. An all-zero
    mask gives a loss of exactly zero with zero gradient.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(f"target id out of range for vocab size {vocab}")
    if mask is None:
        mask = np.ones(targets.shape)
    mask = np.asarray(mask, dtype=logits.data.dtype)
    if mask.shape != targets.shape:
        raise ValueError(f"mask shape {mask.shape} does not match targets {targets.shape}")
    logp = log_softmax(logits, axis=-1)
    picked = gather(logp, targets[..., None], axis=-1)
    picked = reshape(picked, targets.shape)
    denom = max(float(mask.sum()), 1.0)
    return -(sum(picked * mask) * (1.0 / denom))
