"""Reverse-mode differentiable arrays on top of numpy.

Every op returns a new :class:`Tensor`. When any input requires a gradient
the result records its parents and a closure that maps the output gradient
to input gradients. :func:`backward` walks that graph once in reverse
topological order and then drops it.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT32 = "float32"
FLOAT16 = "float16"  # emulated: values are f16-representable, storage is f32
DTYPES = (FLOAT32, FLOAT16)

_compute = {"dtype": np.float32, "grad": True}


def compute_dtype():
    return _compute["dtype"]


@contextmanager
def float64_mode():
    """Run ops in float64 (used by finite-difference gradient checks)."""
    prev = _compute["dtype"]
    _compute["dtype"] = np.float64
    try:
        yield
    finally:
        _compute["dtype"] = prev


@contextmanager
def no_grad():
    """Skip graph recording (inference)."""
    prev = _compute["grad"]
    _compute["grad"] = False
    try:
        yield
    finally:
        _compute["grad"] = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "dtype", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype: str = FLOAT32, name: str | None = None):
        if dtype not in DTYPES:
            raise ValueError(f"unknown dtype {dtype!r}")
        arr = np.asarray(data, dtype=_compute["dtype"])
        if dtype == FLOAT16:
            arr = arr.astype(np.float16).astype(arr.dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.dtype = dtype
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- introspection -------------------------------------------------
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
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=_compute["dtype"])
    out.dtype = FLOAT32
    out.name = None
    out.requires_grad = _compute["grad"] and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="raise", invalid="raise"):
        out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), back)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="raise", invalid="raise", over="raise"):
        out = a.data ** p
    return _result(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="raise"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="raise", invalid="raise"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="raise"):
        out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(_compute["dtype"])
    return _result(a.data * scale, (a,), lambda g: (g * scale,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = a.data * s
    return _result(out, (a,), lambda g: (g * (s + out * (1.0 - s)),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# -- reductions and shape ops -------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros(a.shape, dtype=_compute["dtype"])
        if _fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result(a.data[idx], (a,), back)


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def pad(a, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` follows ``np.pad``."""
    a = as_tensor(a)
    pad_width = tuple(tuple(p) for p in pad_width)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return _result(np.pad(a.data, pad_width), (a,), lambda g: (g[sl],))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _result(out, tensors, back)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), back)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# -- graph traversal -----------------------------------------------------
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


def backward(loss: Tensor, inputs: Sequence[Tensor] | None = None, retain_graph: bool = False) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss``.

    Returns a map from every leaf tensor with ``requires_grad`` (or from each
    tensor in ``inputs``) to its gradient array. The recorded graph is freed
    unless ``retain_graph`` is set.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached from any tensor that requires a gradient")

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=_compute["dtype"])}
    leaves: dict[int, Tensor] = {}
    for node in reversed(order):
        g = grads.get(id(node))
        if node._backward is None:
            leaves[id(node)] = node
            continue
        if g is None:
            continue
        if not (inputs and any(node is t for t in inputs)):
            grads.pop(id(node))
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=_compute["dtype"])

    if not retain_graph:
        for node in order:
            node._parents = ()
            node._backward = None

    targets = list(inputs) if inputs is not None else list(leaves.values())
    return {t: grads.get(id(t), np.zeros(t.shape, dtype=_compute["dtype"])) for t in targets}
