"""Minimal reverse-mode differentiation over numpy arrays.

Each op builds a ``Tensor`` that remembers its parents and a closure mapping
the output gradient to parent gradients. ``Tensor.backward`` walks the graph
in reverse topological order and accumulates into the ``grad`` of every
trainable leaf (``Parameter``).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import numerics
from .errors import ShapeError, StateError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "__weakref__")
    __array_ufunc__ = None  # make ``ndarray <op> Tensor`` dispatch to the reflected Tensor method

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=numerics.DTYPE)
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return swap_last(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every trainable leaf's ``grad``."""
        if self.data.size != 1:
            raise ShapeError("backward() needs a scalar output")
        if not self.requires_grad:
            raise StateError("no recorded computation: run a forward pass with trainable parameters first")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if isinstance(node, Parameter):
                    node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


class Parameter(Tensor):
    """A named trainable leaf. Frozen parameters never enter the graph."""

    __slots__ = ("name", "grad", "frozen")

    def __init__(self, data, name: str, frozen: bool = False):
        super().__init__(np.array(data, dtype=numerics.DTYPE, copy=True), requires_grad=not frozen)
        if self.data.ndim != 2:
            raise ShapeError(f"parameter {name} must be 2-D, got shape {self.data.shape}")
        self.name = name
        self.frozen = frozen
        self.grad = np.zeros_like(self.data)

    def freeze(self, frozen: bool = True) -> None:
        self.frozen = frozen
        self.requires_grad = not frozen

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.data.shape}, frozen={self.frozen})"


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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)),
    )


def scale_grad(a: Tensor, factor: float) -> Tensor:
    """Identity forward; multiplies the gradient by ``factor`` on the way back."""
    return _make(a.data, (a,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), back)


def swap_last(a: Tensor) -> Tensor:
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def index(a: Tensor, idx) -> Tensor:
    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# fused kernels


def softmax(a: Tensor) -> Tensor:
    s = numerics.softmax_rows(a.data) if a.ndim >= 2 else numerics.softmax_rows(a.data)[0]

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (a,), back)


def log_softmax(a: Tensor) -> Tensor:
    out = numerics.log_softmax_rows(a.data).reshape(a.shape)
    s = np.exp(out)

    def back(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), back)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    out = numerics.logsumexp(a.data, axis=axis, keepdims=True)

    def back(g):
        w = np.exp(a.data - out)
        return (np.expand_dims(g, axis) * w,)

    return _make(np.squeeze(out, axis=axis), (a,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = numerics.LN_EPS) -> Tensor:
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_ = gamma.data.reshape(-1)
    b_ = beta.data.reshape(-1)
    out = g_ * xhat + b_

    def back(g):
        gx_hat = g * g_
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0).reshape(gamma.shape)
        gbeta = g.reshape(-1, d).sum(axis=0).reshape(beta.shape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), back)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean CE over rows of a (B, C) logits tensor."""
    targets = np.asarray(targets)
    value = numerics.cross_entropy(logits.data, targets)
    rows = np.arange(logits.shape[0])

    def back(g):
        p = numerics.softmax_rows(logits.data)
        p[rows, targets] -= 1.0
        return (g * p / logits.shape[0],)

    return _make(np.asarray(value), (logits,), back)


def binary_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean elementwise BCE-with-logits."""
    targets = np.asarray(targets, dtype=numerics.DTYPE)
    value = numerics.binary_cross_entropy(logits.data, targets)

    def back(g):
        p = 0.5 * (1.0 + np.tanh(0.5 * logits.data))
        return (g * (p - targets) / logits.data.size,)

    return _make(np.asarray(value), (logits,), back)
