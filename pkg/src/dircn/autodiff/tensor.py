"""Reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor wraps an ndarray together with a gradient buffer of the same shape.
Non-leaf tensors also hold their parents and a closure mapping the output
gradient to one gradient per parent.  backward() walks the graph once in
reverse topological order and adds the accumulated gradient of every node
into its .grad buffer, so replaying backward without zeroing in between
exactly doubles each gradient.

Complex quantities are not stored as complex dtypes.  They ride on a size-2
(real, imag) channel axis and all complex arithmetic is built from real
primitives; see dircn.autodiff.functional.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

__all__ = ["Tensor", "Parameter"]


def _as_float_array(value) -> np.ndarray:
    arr = np.asarray(value)
    if np.iscomplexobj(arr):
        raise ValueError("complex input: carry complex data on a size-2 channel axis")
    return arr.astype(np.float64, copy=False)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _normalize_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _silu_grad(x: np.ndarray) -> np.ndarray:
    # d/dx x*sigmoid(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x)))
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


class Tensor:
    """Node in a reverse-mode differentiation graph."""

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(
        self,
        data,
        _parents: tuple["Tensor", ...] = (),
        _vjp: Callable[[np.ndarray], tuple] | None = None,
    ):
        self.data = _as_float_array(data)
        self.grad = np.zeros_like(self.data)
        self._parents = _parents
        self._vjp = _vjp

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        kind = type(self).__name__
        return f"{kind}(shape={self.shape}, leaf={self._vjp is None})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    # -- backward pass ------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(node) into .grad for every ancestor node.

        Without an explicit seed the output must be a single element and the
        seed is one.  Gradients add into existing .grad contents; zero them
        first if a fresh pass is wanted.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() without a seed needs a scalar output, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = _as_float_array(grad)
            if grad.shape != self.shape:
                raise ValueError(f"seed shape {grad.shape} does not match output {self.shape}")

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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        pending: dict[int, list[np.ndarray]] = {id(self): [grad]}
        for node in reversed(order):
            slots = pending.pop(id(node), None)
            if slots is None:
                continue
            if len(slots) == 1:
                g = slots[0]
            else:
                g = np.array(slots[0])
                for extra in slots[1:]:
                    g += extra
            node.grad += g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                pending.setdefault(id(parent), []).append(pg)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            out = self.data + other.data
            def vjp(g, a=self, b=other):
                return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
            return Tensor(out, (self, other), vjp)
        c = _as_float_array(other)
        return Tensor(self.data + c, (self,), lambda g: (_unbroadcast(g, self.shape),))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            out = self.data - other.data
            def vjp(g, a=self, b=other):
                return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
            return Tensor(out, (self, other), vjp)
        c = _as_float_array(other)
        return Tensor(self.data - c, (self,), lambda g: (_unbroadcast(g, self.shape),))

    def __rsub__(self, other):
        c = _as_float_array(other)
        return Tensor(c - self.data, (self,), lambda g: (_unbroadcast(-g, self.shape),))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            out = self.data * other.data
            def vjp(g, a=self, b=other):
                return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
            return Tensor(out, (self, other), vjp)
        c = _as_float_array(other)
        return Tensor(self.data * c, (self,), lambda g: (_unbroadcast(g * c, self.shape),))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            out = self.data / other.data
            def vjp(g, a=self, b=other):
                ga = _unbroadcast(g / b.data, a.shape)
                gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
                return ga, gb
            return Tensor(out, (self, other), vjp)
        c = _as_float_array(other)
        return Tensor(self.data / c, (self,), lambda g: (_unbroadcast(g / c, self.shape),))

    def __rtruediv__(self, other):
        c = _as_float_array(other)
        out = c / self.data
        def vjp(g, a=self):
            return (_unbroadcast(-g * c / (a.data * a.data), a.shape),)
        return Tensor(out, (self,), vjp)

    def __neg__(self):
        return Tensor(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(_as_float_array(other))
        if self.ndim != 2 or other.ndim != 2:
            raise ValueError(f"matmul supports 2-d operands, got {self.shape} @ {other.shape}")
        if self.shape[1] != other.shape[0]:
            raise ValueError(f"matmul shape mismatch: {self.shape} @ {other.shape}")
        out = self.data @ other.data
        def vjp(g, a=self, b=other):
            return g @ b.data.T, a.data.T @ g
        return Tensor(out, (self, other), vjp)

    # -- reductions and shape ops --------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axis(axis, self.ndim)
        out = self.data.sum(axis=axes, keepdims=keepdims)
        def vjp(g, a=self):
            if not keepdims and axes:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, a.shape),)
        return Tensor(out, (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axis(axis, self.ndim)
        count = 1
        for a in axes:
            count *= self.shape[a]
        # divide rather than multiply by a reciprocal so mean of n equal
        # values reproduces the value exactly (n/n == 1.0 in IEEE)
        return self.sum(axis=axes, keepdims=keepdims) / float(count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = self.data.reshape(shape)
        return Tensor(out, (self,), lambda g: (g.reshape(self.shape),))

    def __getitem__(self, key) -> "Tensor":
        out = self.data[key]
        def vjp(g, a=self):
            gx = np.zeros(a.shape)
            gx[key] += g
            return (gx,)
        return Tensor(out, (self,), vjp)

    # -- elementwise nonlinearities -------------------------------------------

    def abs(self) -> "Tensor":
        out = np.abs(self.data)
        # subgradient 0 at the kink
        return Tensor(out, (self,), lambda g: (g * np.sign(self.data),))

    def sqrt(self) -> "Tensor":
        if (self.data < 0).any():
            raise ValueError("sqrt of a negative value")
        out = np.sqrt(self.data)
        def vjp(g, o=out):
            # the derivative blows up at 0; pin it to 0 there
            return (g * np.where(o > 0, 0.5 / np.where(o > 0, o, 1.0), 0.0),)
        return Tensor(out, (self,), vjp)

    def sigmoid(self) -> "Tensor":
        out = _sigmoid(self.data)
        return Tensor(out, (self,), lambda g: (g * out * (1.0 - out),))

    def silu(self) -> "Tensor":
        out = self.data * _sigmoid(self.data)
        return Tensor(out, (self,), lambda g: (g * _silu_grad(self.data),))

    def softplus(self) -> "Tensor":
        x = self.data
        out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)
        return Tensor(out, (self,), lambda g: (g * _sigmoid(x),))


class Parameter(Tensor):
    """Trainable leaf tensor, discovered by Module.named_parameters()."""

    __slots__ = ()
