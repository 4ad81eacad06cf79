"""Tape-based reverse-mode differentiation over numpy arrays.

Operations executed while a :class:`Tape` is active, and whose inputs require
gradients, are appended to the tape in execution order; ``Tape.backward`` walks
the record in reverse.
"""

from __future__ import annotations

import contextlib

import numpy as np
import scipy.sparse as sp

_TAPES: list = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=np.float64):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records differentiable operations; use as a context manager."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)

    def record(self, out: Tensor, parents, backward_fn):
        self.nodes.append((out, parents, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(x) into ``x.grad`` for every recorded input."""
        if not self.nodes:
            raise RuntimeError("backward called before any forward pass was recorded on this tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        if not any(out is loss for out, _, _ in self.nodes):
            raise ValueError("loss was not produced by this tape")
        loss.grad = np.ones_like(loss.data)
        for out, parents, fn in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for p, g in zip(parents, grads):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g


def gradients(params) -> list:
    """Gradients of ``params`` after a backward pass; unreachable parameters get zeros."""
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def _emit(data, parents, backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs and bool(_TAPES), dtype=data.dtype)
    if out.requires_grad:
        _TAPES[-1].record(out, parents, backward_fn)
    return out


@contextlib.contextmanager
def no_grad():
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit(s, (a,), lambda g: (g * s * (1 - s),))


def absolute(a: Tensor) -> Tensor:
    return _emit(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def signed_log(a: Tensor) -> Tensor:
    """``sign(x) * ln(|x| + 1)``; derivative ``1 / (|x| + 1)``."""
    x = a.data
    return _emit(np.sign(x) * np.log1p(np.abs(x)), (a,), lambda g: (g / (np.abs(x) + 1.0),))


def bce_with_logits(logits: Tensor, target, eps: float = 1e-7) -> Tensor:
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` clamped to ``[eps, 1 - eps]``."""
    y = np.asarray(target, dtype=float)
    p = 0.5 * (1.0 + np.tanh(0.5 * logits.data))
    pc = np.clip(p, eps, 1 - eps)
    loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    inside = (p > eps) & (p < 1 - eps)

    def back(g):
        # the clamp is flat outside (eps, 1 - eps)
        return (g * np.where(inside, p - y, 0.0),)

    return _emit(loss, (logits,), back)


# ---------------------------------------------------------------- reductions and shapes


def sum_all(a: Tensor) -> Tensor:
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
        return _emit(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n),))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.ndim for ax in axes)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _emit(out, (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _emit(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, key) -> Tensor:
    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return _emit(a.data[key], (a,), back)


def crop(a: Tensor, slices) -> Tensor:
    """Basic-slice view (no fancy indexing), cheaper backward than ``getitem``."""
    slices = tuple(slices)

    def back(g):
        out = np.zeros_like(a.data)
        out[slices] = g
        return (out,)

    return _emit(a.data[slices], (a,), back)


def pad(a: Tensor, widths) -> Tensor:
    widths = tuple(tuple(w) for w in widths)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _emit(np.pad(a.data, widths), (a,), lambda g: (g[sl],))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape (N, in), ``w`` of shape (out, in)."""
    out = x.data @ w.data.T
    parents = (x, w)
    if b is not None:
        out = out + b.data
        parents = (x, w, b)

    def back(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _emit(out, parents, back)


def sparse_matmul(A, x: Tensor) -> Tensor:
    """Constant sparse matrix times a dense tensor of shape (n, C)."""
    A = sp.csr_matrix(A)
    At = A.T.tocsr()
    return _emit(np.asarray(A @ x.data), (x,), lambda g: (np.asarray(At @ g),))


# ---------------------------------------------------------------- convolution


def _conv_geometry(spatial, k, stride, padding):
    out = tuple((n + 2 * padding - k) // stride + 1 for n in spatial)
    if min(out) < 1:
        raise ValueError(f"kernel {k} with padding {padding} does not fit spatial dims {spatial}")
    return out


def conv(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """N-d cross-correlation with zero padding. ``x``: (N, C, *S); ``w``: (O, C, *k)."""
    nd = x.ndim - 2
    if w.ndim != nd + 2 or w.shape[1] != x.shape[1]:
        raise ValueError(f"conv{nd}d: weight shape {w.shape} incompatible with input shape {x.shape}")
    k = w.shape[2]
    out_sp = _conv_geometry(x.shape[2:], k, stride, padding)
    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(padding, padding)] * nd) if padding else x.data
    offsets = list(np.ndindex(*([k] * nd)))

    def window(off):
        return (slice(None), slice(None)) + tuple(
            slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, out_sp)
        )

    # out accumulated as (O, N, *S_out)
    acc = np.zeros((w.shape[0], x.shape[0]) + out_sp)
    for off in offsets:
        acc += np.tensordot(w.data[(slice(None), slice(None)) + off], xp[window(off)], axes=([1], [1]))
    out = np.moveaxis(acc, 0, 1)
    if b is not None:
        out = out + b.data.reshape((1, -1) + (1,) * nd)
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gT = np.moveaxis(g, 1, 0)  # (O, N, *S_out)
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        sum_axes = [0] + list(range(2, nd + 2))
        for off in offsets:
            xs = xp[window(off)]
            gw[(slice(None), slice(None)) + off] = np.tensordot(g, xs, axes=(sum_axes, sum_axes))
            gxp[window(off)] += np.moveaxis(
                np.tensordot(w.data[(slice(None), slice(None)) + off], gT, axes=([0], [0])), 0, 1
            )
        gx = gxp[(slice(None), slice(None)) + tuple(slice(padding, padding + n) for n in x.shape[2:])]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=tuple([0] + list(range(2, nd + 2)))))
        return tuple(grads)

    return _emit(out, parents, back)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of every spatial axis of (N, C, *S)."""
    nd = x.ndim - 2
    out = x.data
    for ax in range(2, nd + 2):
        out = np.repeat(out, factor, axis=ax)

    def back(g):
        shape = list(g.shape[:2])
        for n in x.shape[2:]:
            shape += [n, factor]
        g = g.reshape(shape)
        return (g.sum(axis=tuple(range(3, 3 + 2 * nd, 2))),)

    return _emit(out, (x,), back)
