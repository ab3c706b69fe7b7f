"""A small reverse-mode autodiff tensor over numpy arrays.

Every op records its parents and a closure that pushes the upstream gradient
back to them. ``Tensor.backward`` walks the recorded graph once and then
releases it, so calling it a second time on the same loss is an error.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, StateError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class no_grad:
    """Context manager that stops graph recording on the current thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.enabled = False

    def __exit__(self, *exc):
        _state.enabled = self._prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out axes that numpy broadcasting introduced
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._op = ""
        self._consumed = False

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = None
        out._op = op
        out._consumed = False
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- elementwise arithmetic ------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = self._lift(other)
        out = Tensor._make(self.data + other.data, (self, other), "add")

        def backward():
            self._accumulate(_unbroadcast(out.grad, self.shape))
            other._accumulate(_unbroadcast(out.grad, other.shape))

        out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other) -> "Tensor":
        return self + (-self._lift(other))

    def __rsub__(self, other) -> "Tensor":
        return self._lift(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = self._lift(other)
        out = Tensor._make(self.data * other.data, (self, other), "mul")

        def backward():
            self._accumulate(_unbroadcast(out.grad * other.data, self.shape))
            other._accumulate(_unbroadcast(out.grad * self.data, other.shape))

        out._backward = backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return self * (1.0 / other)

    def __pow__(self, power: int) -> "Tensor":
        out = Tensor._make(self.data**power, (self,), "pow")

        def backward():
            self._accumulate(out.grad * power * self.data ** (power - 1))

        out._backward = backward
        return out

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if self.ndim != 2 or other.ndim != 2:
            raise DimensionError("matmul operands", "2-D", (self.shape, other.shape))
        if self.shape[1] != other.shape[0]:
            raise DimensionError("matmul inner width", self.shape[1], other.shape[0])
        out = Tensor._make(self.data @ other.data, (self, other), "matmul")

        def backward():
            self._accumulate(out.grad @ other.data.T)
            other._accumulate(self.data.T @ out.grad)

        out._backward = backward
        return out

    # -- reductions and indexing -----------------------------------------
    def sum(self, axis: int | None = None) -> "Tensor":
        out = Tensor._make(np.asarray(self.data.sum(axis=axis)), (self,), "sum")

        def backward():
            g = out.grad if axis is None else np.expand_dims(out.grad, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        out._backward = backward
        return out

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.size)

    def take_rows(self, rows) -> "Tensor":
        rows = np.asarray(rows, dtype=np.intp)
        out = Tensor._make(self.data[rows], (self,), "take_rows")

        def backward():
            g = np.zeros_like(self.data)
            np.add.at(g, rows, out.grad)
            self._accumulate(g)

        out._backward = backward
        return out

    # -- activations -----------------------------------------------------
    def relu(self) -> "Tensor":
        mask = self.data > 0
        out = Tensor._make(np.where(mask, self.data, 0).astype(self.dtype), (self,), "relu")

        def backward():
            self._accumulate(out.grad * mask)

        out._backward = backward
        return out

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        out = Tensor._make(y, (self,), "tanh")

        def backward():
            self._accumulate(out.grad * (1 - y * y))

        out._backward = backward
        return out

    # -- autodiff driver -------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every tensor that contributed to this scalar."""
        if self._consumed:
            raise StateError("backward() already ran on this graph; recompute the forward pass first")
        if self.size != 1:
            raise DimensionError("backward() root", "a scalar", self.shape)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()
        for node in order:
            if node._parents or node is self:
                node._parents = ()
                node._backward = None
                node._consumed = True


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Fused ``x @ weight + bias`` with weight stored (in_features, out_features)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError("linear input width", weight.shape[0], x.shape[-1] if x.ndim else x.shape)
    data = x.data @ weight.data
    if bias is not None:
        data = data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor._make(data, parents, "linear")

    def backward():
        g = out.grad
        x._accumulate(g @ weight.data.T)
        weight._accumulate(x.data.T @ g)
        if bias is not None:
            bias._accumulate(g.sum(axis=0))

    out._backward = backward
    return out
