"""Dense float tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a row-major numpy array. Operations performed while
grad recording is enabled attach a node to a dynamically built graph; calling
:meth:`Tensor.backward` on a scalar result walks that graph once in reverse
topological order and accumulates gradients into every leaf that requires them.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_DEBUG = os.environ.get("CMIX_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def get_default_dtype() -> np.dtype:
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are stored in.

    float32 is the working precision. float64 exists for finite-difference
    gradient checks, where float32 round-off would swamp the comparison.
    """
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_debug(flag: bool) -> None:
    """Turn on non-finite checks after every operation (off by default)."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    """N-dimensional float array that can take part in an autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"every extent must be >= 1, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape, dtype=_DTYPE), requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape, dtype=_DTYPE), requires_grad)

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return elementwise("add", self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return elementwise("sub", self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return elementwise("mul", self, other)

    def __neg__(self) -> "Tensor":
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        shape = self.shape
        return _make(np.asarray(self.data.sum(dtype=np.float64), dtype=self.data.dtype), (self,),
                     lambda g: (np.broadcast_to(g, shape).astype(g.dtype),), "sum")

    def mean(self) -> "Tensor":
        shape, n = self.shape, self.size
        return _make(np.asarray(self.data.mean(dtype=np.float64), dtype=self.data.dtype), (self,),
                     lambda g: (np.full(shape, g / n, dtype=g.dtype),), "mean")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(str(exc)) from None
        return _make(out, (self,), lambda g: (g.reshape(old),), "reshape")

    # -- autodiff -------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward() already ran on this graph; rebuild it with a new forward pass")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones(self.shape, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # free saved activations; a second backward over the same graph is an error
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.grad = None
    out.op = op
    out._consumed = False
    if _DEBUG and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    if _GRAD_ENABLED and any(_needs_grad(p) for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _broadcast_ok(a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> bool:
    if a_shape == b_shape:
        return True
    if len(a_shape) != len(b_shape):
        return False
    return all(bd == ad or bd == 1 for ad, bd in zip(a_shape, b_shape))


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    return g.sum(axis=axes, keepdims=True)


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """``a op b`` for op in {add, sub, mul}; ``b`` may have extent-1 axes."""
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"cannot {op} shapes {a.shape} and {b.shape}")
    a_shape, b_shape = a.shape, b.shape
    if op == "add":
        out = a.data + b.data

        def backward(g):
            return g, _reduce_to(g, b_shape)
    elif op == "sub":
        out = a.data - b.data

        def backward(g):
            return g, -_reduce_to(g, b_shape)
    elif op == "mul":
        out = a.data * b.data
        ad, bd = a.data, b.data

        def backward(g):
            return _reduce_to(g * bd, a_shape), _reduce_to(g * ad, b_shape)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return _make(out, (a, b), backward, op)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (m,k)x(k,n), got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), backward, "matmul")
