"""Reverse-mode automatic differentiation over dense numpy arrays.

Each :class:`Tensor` remembers the tensors it was computed from and a closure
that maps its output gradient onto those inputs. :func:`backward` walks the
graph in reverse topological order.

Leaf gradients accumulate across repeated ``backward`` calls until
:meth:`Tensor.zero_grad` is called; interior gradients are rebuilt on every
call so a shared subexpression is counted exactly once per use-path.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "_grad", "_parents", "_backward", "requires_grad", "name")
    __array_ufunc__ = None  # make ``ndarray op Tensor`` defer to the reflected Tensor op

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "iub":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self._grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.requires_grad = requires_grad
        self.name = name

    # -- gradient storage -------------------------------------------------
    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ValueError(f"grad shape {value.shape} != data shape {self.data.shape}")
        self._grad = value

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self._grad += g

    def zero_grad(self) -> None:
        self._grad = None

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    # -- convenience --------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar (implementations live in ops) -----------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def exp(self):
        from . import ops
        return ops.exp(self)

    def log(self):
        from . import ops
        return ops.log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def make_result(data: np.ndarray, parents: Sequence[Tensor],
                backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap ``data`` as the output of an operation over ``parents``.

    The graph edge is only recorded when grad mode is on and some parent
    requires a gradient.
    """
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


@dataclass
class ComputationTape:
    """Operations reachable from ``root`` in topological order (inputs first)."""

    nodes: list[Tensor]
    root: Tensor

    def __len__(self) -> int:
        return len(self.nodes)


def build_tape(root: Tensor) -> ComputationTape:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return ComputationTape(order, root)


def backward(root: Tensor) -> ComputationTape:
    """Populate ``grad`` on every ancestor of the scalar ``root``."""
    if root.data.size != 1:
        raise ValueError(f"backward() needs a scalar root, got shape {root.shape}")
    tape = build_tape(root)
    for node in tape.nodes:
        if not node.is_leaf:
            node._grad = None
    root._grad = np.ones_like(root.data)
    for node in reversed(tape.nodes):
        if node._backward is not None and node._grad is not None:
            node._backward(node._grad)
    return tape


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
