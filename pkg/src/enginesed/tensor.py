"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus an optional gradient and a backward closure.
Calling backward() on a scalar loss walks the graph once in reverse
topological order and accumulates gradients into every reachable tensor
with requires_grad set. Gradients accumulate across repeated backward
calls until zero_grad().
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        if isinstance(data, Tensor):
            raise ConfigError("cannot wrap a Tensor in a Tensor")
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    # -- autodiff -----------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise NumericError(f"backward requires a scalar, got shape {self.data.shape}")
        order = _toposort(self)
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ConfigError("tensor/tensor division not supported; use reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def ensure_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
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


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _needs_graph(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data, parents, backward) -> Tensor:
    data = np.asarray(data)
    if any(_needs_graph(p) for p in parents):
        live = tuple(p for p in parents if _needs_graph(p))
        return Tensor(data, parents=live, backward=backward)
    return Tensor(data)


def _as_scalar(v):
    """Python/numpy scalars stay raw constants so dtype promotion follows
    numpy's array-scalar rules (float32 tensors are not upcast)."""
    if isinstance(v, (int, float)):
        return v
    if isinstance(v, np.generic) and v.ndim == 0:
        return v
    return None


# ---------------------------------------------------------------------------
# elementwise and linear algebra

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(a, Tensor):
        a = ensure_tensor(a)
    const = _as_scalar(b)
    if const is not None:
        out_data = a.data + const

        def backward(g):
            a.accumulate_grad(g)

        return _make(out_data, (a,), backward)
    a, b = ensure_tensor(a), ensure_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if _needs_graph(a):
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if _needs_graph(b):
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(a, Tensor):
        a = ensure_tensor(a)
    const = _as_scalar(b)
    if const is not None:
        out_data = a.data * const

        def backward(g):
            a.accumulate_grad(g * const)

        return _make(out_data, (a,), backward)
    a, b = ensure_tensor(a), ensure_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if _needs_graph(a):
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if _needs_graph(b):
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = ensure_tensor(a), ensure_tensor(b)
    out_data = a.data @ b.data

    def backward(g):
        if _needs_graph(a):
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if _needs_graph(b):
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward)


def relu(x) -> Tensor:
    x = ensure_tensor(x)
    out_data = np.maximum(x.data, 0)

    def backward(g):
        x.accumulate_grad(g * (x.data > 0))

    return _make(out_data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = ensure_tensor(x)
    out_data = _sigmoid(x.data)

    def backward(g):
        x.accumulate_grad(g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def tanh(x) -> Tensor:
    x = ensure_tensor(x)
    out_data = np.tanh(x.data)

    def backward(g):
        x.accumulate_grad(g * (1.0 - out_data * out_data))

    return _make(out_data, (x,), backward)


def exp(x) -> Tensor:
    x = ensure_tensor(x)
    out_data = np.exp(x.data)

    def backward(g):
        x.accumulate_grad(g * out_data)

    return _make(out_data, (x,), backward)


def log(x) -> Tensor:
    x = ensure_tensor(x)
    out_data = np.log(x.data)

    def backward(g):
        x.accumulate_grad(g / x.data)

    return _make(out_data, (x,), backward)


def sqrt(x) -> Tensor:
    x = ensure_tensor(x)
    out_data = np.sqrt(x.data)

    def backward(g):
        x.accumulate_grad(g * 0.5 / out_data)

    return _make(out_data, (x,), backward)


def reciprocal(x) -> Tensor:
    x = ensure_tensor(x)
    out_data = 1.0 / x.data

    def backward(g):
        x.accumulate_grad(-g * out_data * out_data)

    return _make(out_data, (x,), backward)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is passed through only inside [lo, hi]."""
    x = ensure_tensor(x)
    out_data = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        x.accumulate_grad(g * mask)

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = ensure_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            x.accumulate_grad(np.broadcast_to(g, x.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate_grad(np.broadcast_to(g, x.data.shape).copy())

    return _make(np.asarray(out_data), (x,), backward)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = ensure_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= x.data.shape[ax]
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def tmax(x, axis: int) -> Tensor:
    """Max along one axis; ties route gradient to the first maximal entry."""
    x = ensure_tensor(x)
    out_data = x.data.max(axis=axis)
    idx = x.data.argmax(axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis)
        x.accumulate_grad(gx)

    return _make(out_data, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = ensure_tensor(x)
    orig = x.data.shape
    out_data = x.data.reshape(shape)

    def backward(g):
        x.accumulate_grad(g.reshape(orig))

    return _make(out_data, (x,), backward)


def transpose(x, axes=None) -> Tensor:
    x = ensure_tensor(x)
    out_data = np.transpose(x.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        x.accumulate_grad(np.transpose(g, inverse))

    return _make(out_data, (x,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [ensure_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if _needs_graph(t):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(sl)])

    return _make(out_data, tuple(tensors), backward)


def dropout(x, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: zero with prob p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    x = ensure_tensor(x)
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    scale = 1.0 / (1.0 - p)
    out_data = x.data * keep * scale

    def backward(g):
        x.accumulate_grad(g * keep * scale)

    return _make(out_data, (x,), backward)
