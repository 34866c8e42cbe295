"""A small reverse-mode differentiation engine over numpy arrays.

Every operation returns a :class:`TapeNode` holding its forward value and,
when any operand needs a gradient, a closure that pushes the output adjoint
back to the operands. :meth:`TapeNode.backward` visits the graph once in
reverse topological order.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit


class TapeNode:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, value, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def _acc(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, seed=None):
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._acc(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
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
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64)) if not isinstance(other, TapeNode) \
            else mul(self, reciprocal(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"TapeNode(op={self.op}, shape={self.shape})"


def as_node(x):
    return x if isinstance(x, TapeNode) else TapeNode(x)


def _make(value, parents, backward, op):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return TapeNode(value, True, parents, backward, op)
    return TapeNode(value, op=op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = as_node(a), as_node(b)

    def back(g):
        a._acc(_unbroadcast(g, a.shape))
        b._acc(_unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), back, "add")


def sub(a, b):
    a, b = as_node(a), as_node(b)

    def back(g):
        a._acc(_unbroadcast(g, a.shape))
        b._acc(_unbroadcast(-g, b.shape))

    return _make(a.value - b.value, (a, b), back, "sub")


def mul(a, b):
    a, b = as_node(a), as_node(b)

    def back(g):
        a._acc(_unbroadcast(g * b.value, a.shape))
        b._acc(_unbroadcast(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), back, "mul")


def reciprocal(a):
    a = as_node(a)
    out = 1.0 / a.value

    def back(g):
        a._acc(-g * out * out)

    return _make(out, (a,), back, "reciprocal")


# below this output width BLAS switches to kernels whose per-row rounding
# depends on the neighbouring rows
_NARROW = 4


def _rowwise_product(x, w):
    if x.ndim == 2 and w.ndim == 2 and w.shape[1] < _NARROW:
        return np.einsum("ij,jk->ik", x, w)
    return x @ w


def matmul(a, b):
    """Matrix product whose rows are each computed independently of the others."""
    a, b = as_node(a), as_node(b)

    def back(g):
        a._acc(g @ b.value.T)
        b._acc(a.value.T @ g)

    return _make(_rowwise_product(a.value, b.value), (a, b), back, "matmul")


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)

    def back(g):
        a._acc(g * out)

    return _make(out, (a,), back, "exp")


def log(a):
    a = as_node(a)

    def back(g):
        a._acc(g / a.value)

    return _make(np.log(a.value), (a,), back, "log")


def square(a):
    a = as_node(a)

    def back(g):
        a._acc(2.0 * g * a.value)

    return _make(a.value * a.value, (a,), back, "square")


def silu(a):
    a = as_node(a)
    sig = expit(a.value)

    def back(g):
        a._acc(g * sig * (1.0 + a.value * (1.0 - sig)))

    return _make(a.value * sig, (a,), back, "silu")


def tanh(a):
    a = as_node(a)
    out = np.tanh(a.value)

    def back(g):
        a._acc(g * (1.0 - out * out))

    return _make(out, (a,), back, "tanh")


def clip(a, lo, hi):
    """Clamp values; the gradient is zero wherever the clamp is active."""
    a = as_node(a)
    inside = (a.value >= lo) & (a.value <= hi)

    def back(g):
        a._acc(g * inside)

    return _make(np.clip(a.value, lo, hi), (a,), back, "clip")


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_node(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._acc(np.broadcast_to(g, a.shape))

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a, axis=None):
    a = as_node(a)
    count = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / count)


def reshape(a, shape):
    a = as_node(a)

    def back(g):
        a._acc(g.reshape(a.shape))

    return _make(a.value.reshape(shape), (a,), back, "reshape")


def concat(nodes, axis=-1):
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        for n, piece in zip(nodes, np.split(g, cuts, axis=axis)):
            n._acc(piece)

    return _make(np.concatenate([n.value for n in nodes], axis=axis), nodes, back, "concat")


def take_slice(flat, start, stop, shape):
    """View ``flat[start:stop]`` reshaped; the adjoint lands in that slice."""
    flat = as_node(flat)

    def back(g):
        if flat.grad is None:
            flat.grad = np.zeros_like(flat.value)
        flat.grad[start:stop] += g.ravel()

    return _make(flat.value[start:stop].reshape(shape), (flat,), back, "slice")


def take_rows(a, idx):
    """``a[idx]`` along axis 0 (a gather); repeated indices accumulate."""
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        a._acc(full)

    return _make(a.value[idx], (a,), back, "take_rows")


def take_along_rows(a, cols):
    """``a[b, cols[b]]`` for a 2-D ``a``."""
    a = as_node(a)
    rows = np.arange(a.shape[0])
    cols = np.asarray(cols, dtype=np.int64)

    def back(g):
        full = np.zeros_like(a.value)
        full[rows, cols] = g
        a._acc(full)

    return _make(a.value[rows, cols], (a,), back, "take_along_rows")


def segment_sum(a, seg, n_segments):
    """Per-segment row sums. Rows are accumulated in a canonical order (sorted
    by value within each segment), so the result does not depend on how the
    rows of a segment are permuted."""
    a = as_node(a)
    seg = np.asarray(seg, dtype=np.int64)
    v = a.value.reshape(a.value.shape[0], -1)
    order = np.lexsort(tuple(v.T[::-1]) + (seg,))
    out = np.zeros((n_segments,) + a.shape[1:])
    np.add.at(out, seg[order], a.value[order])

    def back(g):
        a._acc(g[seg])

    return _make(out, (a,), back, "segment_sum")


def segment_mean(a, seg, counts):
    counts = np.asarray(counts, dtype=np.float64)
    total = segment_sum(a, seg, counts.size)
    scale = (1.0 / counts).reshape((-1,) + (1,) * (a.value.ndim - 1))
    return mul(total, scale)


def log_softmax(a):
    """Row-wise log-softmax of a 2-D array."""
    a = as_node(a)
    z = a.value - a.value.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(out)

    def back(g):
        a._acc(g - p * g.sum(axis=1, keepdims=True))

    return _make(out, (a,), back, "log_softmax")


def segment_log_softmax(a, seg, n_segments):
    """Log-softmax of a 1-D array within each segment."""
    a = as_node(a)
    seg = np.asarray(seg, dtype=np.int64)
    mx = np.full(n_segments, -np.inf)
    np.maximum.at(mx, seg, a.value)
    z = a.value - mx[seg]
    tot = np.zeros(n_segments)
    np.add.at(tot, seg, np.exp(z))
    out = z - np.log(tot)[seg]
    p = np.exp(out)

    def back(g):
        gs = np.zeros(n_segments)
        np.add.at(gs, seg, g)
        a._acc(g - p * gs[seg])

    return _make(out, (a,), back, "segment_log_softmax")


def softmax(a):
    return exp(log_softmax(a))


def maximum(a, floor):
    """``max(a, floor)`` for a constant floor; zero gradient where clamped."""
    a = as_node(a)
    above = a.value > floor

    def back(g):
        a._acc(g * above)

    return _make(np.maximum(a.value, floor), (a,), back, "maximum")


def grad(params, loss_builder):
    """Gradient of the scalar ``loss_builder(node)`` with respect to ``params``.

    ``params`` is a flat array; parameters the loss never touches get an
    exactly zero gradient.
    """
    p = TapeNode(np.array(params, dtype=np.float64, copy=True), requires_grad=True)
    loss = loss_builder(p)
    if loss.value.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if not np.isfinite(loss.value).all():
        raise FloatingPointError("non-finite loss in forward pass")
    loss.backward()
    return np.zeros_like(p.value) if p.grad is None else p.grad
