"""Dense tensors with tape-based reverse-mode differentiation.

Every op records its parents and a backward closure. Node ids increase
monotonically, so sorting reachable nodes by id gives a valid topological
order for the reverse sweep.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_node_ids = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that stops ops from recording backward closures."""

    def __enter__(self):
        global _grad_enabled
        self._prev, _grad_enabled = _grad_enabled, False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward: Callable[[np.ndarray], None] | None = None, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def _accumulate(self, g: np.ndarray):
        # grads are never written in place, so the first one can be kept by reference
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # operator sugar; resolved through module globals so tests can patch rules
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def relu(self):
        return relu(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, name: str) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, name=name)
    return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), backward, "neg")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 2-D right operand is applied to the flattened rows of ``a`` so every
    row goes through one GEMM call.
    """
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} x {b.shape}")

    if b.ndim == 2:
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)
        out_data = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, b.shape[1])
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(a2.T @ g2)

        return _make(out_data, (a, b), backward, "matmul")

    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out_data, (a, b), backward, "matmul")


def _relu_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (x > 0)


def relu(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(_relu_grad(a.data, g))

    return _make(np.maximum(a.data, 0), (a,), backward, "relu")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.asarray(out_data), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def backward(g):
        a._accumulate(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), backward, "transpose")


def index(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    def backward(g):
        full = np.zeros_like(a.data)
        full[key] += g
        a._accumulate(full)

    return _make(np.asarray(a.data[key]), (a,), backward, "index")


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim

    def backward(g):
        a._accumulate(_scatter_add(g, indices, axis, a.shape))

    return _make(np.take(a.data, indices, axis=axis), (a,), backward, "take")


def _scatter_add(g: np.ndarray, indices: np.ndarray, axis: int, shape) -> np.ndarray:
    n = shape[axis]
    gm = np.moveaxis(g, axis, 0)
    if len(np.unique(indices)) == len(indices):
        full = np.zeros((n,) + gm.shape[1:], dtype=g.dtype)
        full[indices] = gm
    elif n * len(indices) <= 1 << 20:
        onehot = np.zeros((n, len(indices)), dtype=g.dtype)
        onehot[indices, np.arange(len(indices))] = 1
        full = (onehot @ gm.reshape(len(indices), -1)).reshape((n,) + gm.shape[1:])
    else:
        full = np.zeros((n,) + gm.shape[1:], dtype=g.dtype)
        np.add.at(full, indices, gm)
    return np.moveaxis(full, 0, axis)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out_data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(out_data, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis=axis)


def shift(a: Tensor, offset: int, axis: int) -> Tensor:
    """out[..., t, ...] = a[..., t + offset, ...], zero where out of range."""
    ax = axis % a.ndim
    n = a.shape[ax]
    out = np.zeros_like(a.data)

    def _sl(lo, hi):
        s = [slice(None)] * a.ndim
        s[ax] = slice(lo, hi)
        return tuple(s)

    if abs(offset) < n:
        if offset >= 0:
            out[_sl(0, n - offset)] = a.data[_sl(offset, n)]
        else:
            out[_sl(-offset, n)] = a.data[_sl(0, n + offset)]

    def backward(g):
        ga = np.zeros_like(a.data)
        if abs(offset) < n:
            if offset >= 0:
                ga[_sl(offset, n)] = g[_sl(0, n - offset)]
            else:
                ga[_sl(0, n + offset)] = g[_sl(-offset, n)]
        a._accumulate(ga)

    return _make(out, (a,), backward, "shift")


def segment_sum(a: Tensor, segment_ids, num_segments: int, axis: int = -2) -> Tensor:
    """Sum slices of ``a`` along ``axis`` into ``num_segments`` buckets.

    Each bucket's terms are sorted element-wise before summation, so the
    result does not depend on the order in which the terms are listed.
    """
    segment_ids = np.asarray(segment_ids, dtype=np.intp)
    ax = axis % a.ndim
    moved = np.moveaxis(a.data, ax, 0)
    counts = np.bincount(segment_ids, minlength=num_segments)
    width = int(counts.max()) if counts.size else 0
    padded = np.zeros((num_segments, max(width, 1)) + moved.shape[1:], dtype=a.dtype)
    fill = np.zeros(num_segments, dtype=np.intp)
    for e, s in enumerate(segment_ids):
        padded[s, fill[s]] = moved[e]
        fill[s] += 1
    summed = np.sort(padded, axis=1).sum(axis=1)
    out_data = np.moveaxis(summed, 0, ax)

    def backward(g):
        a._accumulate(np.take(g, segment_ids, axis=ax))

    return _make(np.ascontiguousarray(out_data), (a,), backward, "segment_sum")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row ``-log softmax(logits)[target]`` with max subtraction."""
    targets = np.asarray(targets, dtype=np.intp)
    x = logits.data
    if x.ndim == 1:
        x2 = x[None, :]
        t2 = targets.reshape(1)
    else:
        x2, t2 = x, targets
    num_classes = x2.shape[-1]
    if num_classes < 2:
        raise ShapeError("cross-entropy needs at least 2 classes")
    if np.any(t2 < 0) or np.any(t2 >= num_classes):
        raise IndexError(f"target out of range for {num_classes} classes: {targets.tolist()}")
    shifted = x2 - x2.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(x2.shape[0])
    losses = lse - shifted[rows, t2]
    out_data = losses[0] if x.ndim == 1 else losses

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, t2] -= 1.0
        gg = np.asarray(g).reshape(-1, 1) * p
        logits._accumulate(gg.reshape(x.shape))

    return _make(np.asarray(out_data), (logits,), backward, "cross_entropy")


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Reverse sweep from a scalar ``loss``.

    Tensors listed in ``params`` that the loss does not reach end up with a
    zero gradient rather than none.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: dict[int, Tensor] = {}
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if t.node_id in order or not t.requires_grad:
            continue
        order[t.node_id] = t
        stack_.extend(t._parents)
    if loss.requires_grad:
        loss._accumulate(np.ones_like(loss.data))
    for nid in sorted(order, reverse=True):
        t = order[nid]
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    for nid, t in order.items():
        if t._backward is not None:
            # release intermediate buffers; leaves keep theirs
            t.grad = None
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
