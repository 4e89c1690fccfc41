"""Reverse-mode differentiation over dense float64 arrays.

Every op builds its output eagerly and, when any input requires a gradient,
attaches a closure that maps the output gradient to input gradients.
``backward`` orders the recorded ops topologically into a :class:`Tape`
and replays it once.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np
import scipy.sparse as sp

from . import kernels

CHECK_FINITE = True
_RECORDING = [True]


@contextmanager
def no_grad():
    """Evaluate ops without recording them."""
    prev = _RECORDING[0]
    _RECORDING[0] = False
    try:
        yield
    finally:
        _RECORDING[0] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._consumed = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _all_finite(a):
    # a finite sum implies finite entries; fall back to the full scan otherwise
    return np.isfinite(a.sum()) or bool(np.isfinite(a).all())


def _make(data, parents, backward_fn):
    if CHECK_FINITE and not _all_finite(data):
        raise FloatingPointError("non-finite value produced by autodiff op")
    out = Tensor(data)
    if _RECORDING[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tape:
    """Ops reachable from a scalar loss, in topological order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss):
        order, seen = [], set()
        stack = [(loss, False)]
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
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def run(self, loss):
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if node._backward is None:
                # leaf
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            if CHECK_FINITE and not _all_finite(g):
                raise FloatingPointError("non-finite gradient during backward")
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in self.nodes:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def backward(loss):
    if loss._consumed:
        raise RuntimeError("backward already ran for this recording; rebuild the forward pass")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any parameter")
    if loss._backward is None:
        raise RuntimeError("empty tape: loss is a leaf")
    tape = Tape.from_loss(loss)
    tape.run(loss)
    loss._consumed = True


# -- elementwise / linear algebra -------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa) if ra else None,
                            _unbroadcast(g, sb) if rb else None))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    ra, rb = a.requires_grad, b.requires_grad
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa) if ra else None,
                            -_unbroadcast(g, sb) if rb else None))


def mul(a, b):
    """Elementwise product with broadcasting; either side may be constant."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape) if ra else None,
                            _unbroadcast(g * ad, bd.shape) if rb else None))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad
    return _make(ad @ bd, (a, b),
                 lambda g: (g @ bd.T if ra else None, ad.T @ g if rb else None))


def relu(x):
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=0.01):
    scale = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def tsum(x, axis=None):
    shape = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), bw)


def tmean(x, axis=None):
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def slice_cols(x, start, stop):
    """Columns ``start:stop`` of a 2-D tensor."""
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _make(x.data[:, start:stop], (x,), bw)


def take_rows(x, idx):
    """Row gather; also serves as embedding lookup."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def bw(g):
        return (_scatter(idx, g, shape[0]),)

    return _make(x.data[idx], (x,), bw)


def embedding(table, idx):
    return take_rows(table, idx)


# -- segment ops ------------------------------------------------------------

def _scatter(idx, vals, n):
    """Row scatter-add of ``vals`` into ``n`` rows (any trailing shape)."""
    tail = vals.shape[1:]
    flat = np.ascontiguousarray(vals.reshape(len(idx), int(np.prod(tail))))
    return kernels.scatter_add_rows(idx, flat, n).reshape((n,) + tail)


def segment_sum(x, seg, n):
    """Sum rows of ``x`` into ``n`` buckets given by ``seg``; empty buckets are 0."""
    seg = np.asarray(seg, dtype=np.int64)
    return _make(_scatter(seg, x.data, n), (x,), lambda g: (g[seg],))


def segment_counts(seg, n):
    return np.bincount(np.asarray(seg, dtype=np.int64), minlength=n).astype(np.float64)


def segment_mean(x, seg, n):
    counts = segment_counts(seg, n)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    inv = inv.reshape((n,) + (1,) * (x.ndim - 1))
    return mul(segment_sum(x, seg, n), inv)


def segment_softmax(x, seg, n):
    """Softmax of ``x`` rows within each segment (column-wise for 2-D ``x``)."""
    seg = np.asarray(seg, dtype=np.int64)
    flat = np.ascontiguousarray(x.data.reshape(len(seg), int(np.prod(x.shape[1:]))))
    m = kernels.segment_max_rows(seg, flat, n)
    e = np.exp(flat - m[seg])
    y = e / kernels.scatter_add_rows(seg, e, n)[seg]
    y = y.reshape(x.shape)

    def bw(g):
        s = _scatter(seg, g * y, n)
        return (y * (g - s[seg]),)

    return _make(y, (x,), bw)


def spmm(matrix, x):
    """Constant sparse matrix times tensor."""
    matrix = sp.csr_matrix(matrix)
    return _make(np.asarray(matrix @ x.data), (x,), lambda g: (np.asarray(matrix.T @ g),))


def edge_aggregate(weights, x, src, dst, n_dst):
    """out[d, k] = sum over edges (s -> d) of weights[e, k] * x[s, k-th head block].

    ``weights`` is (E, H); ``x`` is (N_src, H*F); the output is (n_dst, H*F).
    """
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    w = np.ascontiguousarray(weights.data)
    xd = np.ascontiguousarray(x.data)
    heads = w.shape[1]

    def bw(g):
        g = np.ascontiguousarray(g)
        gw = kernels.head_sddmm(g, xd, src, dst, heads)
        gx = kernels.head_spmm(w, g, dst, src, xd.shape[0])
        return gw, gx

    return _make(kernels.head_spmm(w, xd, src, dst, n_dst), (weights, x), bw)


# -- special ----------------------------------------------------------------

def grl(x, alpha):
    """Gradient reversal: identity forward, gradient scaled by ``-alpha`` backward."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    a = float(alpha)
    return _make(x.data.copy(), (x,), lambda g: (-a * g,))


def mse_loss(pred, target):
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    diff = pred - Tensor(target)
    return tmean(mul(diff, diff))


def softmax_cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    p = np.exp(logp)

    def bw(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _make(np.asarray(-logp[np.arange(n), labels].mean()), (logits,), bw)
