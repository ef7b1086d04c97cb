"""Minimal reverse-mode automatic differentiation over numpy arrays.

Supports exactly the operations the defense networks need: dense layers,
GRU gates, softmax heads and the scalar losses built from them. Not a
general autodiff system; anything outside this op set should be computed
in plain numpy and fed in as constants.

Gradients accumulate in a fixed topological order so that repeated runs
with the same inputs are bit-reproducible.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class GradientUsageError(RuntimeError):
    """Backward called on a tensor that has no recorded computation."""


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[Array], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; the heavy lifting lives in the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _make(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bw(g: Array) -> None:
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def bw(g: Array) -> None:
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bw(g: Array) -> None:
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bw)


def matmul(a, b) -> Tensor:
    """Matrix product for the two shapes the networks use: (n,k)@(k,m) and (k,)@(k,m)."""
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def bw(g: Array) -> None:
        if a.data.ndim == 1:
            _accum(a, b.data @ g)
            _accum(b, a.data[:, None] * g[None, :])
        else:
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def bw(g: Array) -> None:
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = _sigmoid_np(a.data)

    def bw(g: Array) -> None:
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw)


def _sigmoid_np(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bw(g: Array) -> None:
        _accum(a, g * out_data)

    return _make(out_data, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def bw(g: Array) -> None:
        _accum(a, g / a.data)

    return _make(out_data, (a,), bw)


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g: Array) -> None:
        gg = g if (axis is None or keepdims) else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(out_data, (a,), bw)


def tmean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def bw(g: Array) -> None:
        offset = 0
        for t, s in zip(ts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + s)
            _accum(t, g[tuple(idx)])
            offset += s

    return _make(out_data, tuple(ts), bw)


def stack_rows(tensors: Sequence) -> Tensor:
    """Stack 1-D tensors into a (n, k) matrix."""
    ts = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in ts], axis=0)

    def bw(g: Array) -> None:
        for i, t in enumerate(ts):
            _accum(t, g[i])

    return _make(out_data, tuple(ts), bw)


def gather_rows(a, index: Array) -> Tensor:
    """Pick one column per row of a (n, k) tensor; returns shape (n,)."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out_data = a.data[rows, idx]

    def bw(g: Array) -> None:
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        _accum(a, full)

    return _make(out_data, (a,), bw)


def square(a) -> Tensor:
    a = as_tensor(a)
    return mul(a, a)


def log_softmax_rows(a) -> Tensor:
    """Row-wise log-softmax of a (n, k) or (k,) tensor, numerically stable."""
    a = as_tensor(a)
    axis = a.data.ndim - 1
    shift = a.data.max(axis=axis, keepdims=True)  # constant shift; softmax is shift-invariant
    z = sub(a, Tensor(shift))
    lse = log(tsum(exp(z), axis=axis, keepdims=True))
    return sub(z, lse)


def softmax_rows(a) -> Tensor:
    return exp(log_softmax_rows(a))


def softmax_np(x: Array) -> Array:
    """Plain-numpy softmax for sampling paths that never need gradients."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _accum(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every grad-requiring tensor reachable from ``loss``.

    ``loss`` must be a scalar produced by recorded operations; calling this
    on a bare leaf (no forward computation) is a usage error.
    """
    if loss.data.size != 1:
        raise GradientUsageError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss._parents:
        raise GradientUsageError("backward called without a recorded forward computation")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
