"""Trans-dimensional states and the insertion/deletion operators.

A state is a point ``(n, x)`` of the union space of ``{n} x R^(n*d)`` for
``n = 1..N``. Component ``i`` (1-based) of ``x`` occupies the flat slots
``[(i - 1) * d, i * d)``; every piece of index arithmetic lives here.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class CapacityError(ValueError):
    """Raised when inserting into a state that already holds N components."""


class UnderflowError(ValueError):
    """Raised when deleting from a single-component state."""


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TransState:
    n: int
    x: np.ndarray
    d: int
    N: int

    def __post_init__(self):
        x = _frozen(np.ravel(self.x))
        object.__setattr__(self, "x", x)
        if self.d < 1 or self.N < 1:
            raise ValueError(f"d and N must be positive, got d={self.d}, N={self.N}")
        if not 1 <= self.n <= self.N:
            raise ValueError(f"n={self.n} outside [1, {self.N}]")
        if x.size != self.n * self.d:
            raise ValueError(f"x has {x.size} values, expected n*d={self.n * self.d}")
        if not np.all(np.isfinite(x)):
            raise ValueError("state values must be finite")

    @classmethod
    def from_components(cls, components, N):
        c = np.atleast_2d(np.asarray(components, dtype=np.float64))
        return cls(n=c.shape[0], x=c.ravel(), d=c.shape[1], N=N)

    @property
    def components(self):
        """``(n, d)`` read-only view of the component values."""
        return self.x.reshape(self.n, self.d)

    def component(self, i):
        _check_index(i, self.n)
        return self.x[(i - 1) * self.d:i * self.d]

    def __eq__(self, other):
        if not isinstance(other, TransState):
            return NotImplemented
        return (self.n, self.d, self.N) == (other.n, other.d, other.N) and np.array_equal(self.x, other.x)

    def __hash__(self):
        return hash((self.n, self.d, self.N, self.x.tobytes()))

    def __repr__(self):
        return f"TransState(n={self.n}, d={self.d}, N={self.N}, x={self.x.tolist()})"


@dataclass(frozen=True, eq=False)
class DeletionMask:
    """Which of the ``n0`` clean components survive (1) or were deleted (0)."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits).astype(bool).ravel()
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        if bits.size < 1 or not bits.any():
            raise ValueError("a deletion mask must keep at least one component")

    @property
    def n0(self):
        return self.bits.size

    @property
    def n(self):
        return int(self.bits.sum())

    @classmethod
    def ones(cls, n0):
        return cls(np.ones(n0, dtype=bool))

    def __eq__(self, other):
        if not isinstance(other, DeletionMask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())


@dataclass(frozen=True)
class InsertionEvent:
    y_add: np.ndarray = field(repr=True)
    index: int

    def __post_init__(self):
        object.__setattr__(self, "y_add", _frozen(np.ravel(self.y_add)))


def _check_index(i, upper):
    if not (isinstance(i, (int, np.integer)) and 1 <= i <= upper):
        raise IndexError(f"component index {i} outside [1, {upper}]")


def insert(X, y_add, i):
    """Return ``X`` with ``y_add`` placed as component ``i`` (1-based)."""
    if X.n >= X.N:
        raise CapacityError(f"state already holds N={X.N} components")
    _check_index(i, X.n + 1)
    y = np.ravel(np.asarray(y_add, dtype=np.float64))
    if y.size != X.d:
        raise ValueError(f"inserted component has {y.size} values, expected d={X.d}")
    k = (i - 1) * X.d
    x = np.concatenate([X.x[:k], y, X.x[k:]])
    return TransState(X.n + 1, x, X.d, X.N)


def delete(X, i):
    """Return ``X`` with component ``i`` (1-based) removed."""
    if X.n <= 1:
        raise UnderflowError("cannot delete the last remaining component")
    _check_index(i, X.n)
    k = (i - 1) * X.d
    x = np.concatenate([X.x[:k], X.x[k + X.d:]])
    return TransState(X.n - 1, x, X.d, X.N)


def apply_mask(x0, mask, d):
    """Concatenate the components of flat ``x0`` whose mask bit is set."""
    x0 = np.ravel(np.asarray(x0, dtype=np.float64))
    if x0.size != mask.n0 * d:
        raise ValueError(f"x0 has {x0.size} values, mask expects {mask.n0}*{d}")
    return x0.reshape(mask.n0, d)[mask.bits].ravel()


class RaggedBatch:
    """A batch of states stacked row-wise: ``values`` is ``(R, d)`` and
    ``counts[b]`` rows belong to item ``b``. Used by the batched network and
    sampler; mutation happens in place through :meth:`insert`/:meth:`delete`.
    """

    def __init__(self, values, counts, N):
        self.values = np.asarray(values, dtype=np.float64).reshape(-1, np.shape(values)[-1])
        self.counts = np.asarray(counts, dtype=np.int64)
        self.N = N
        if self.counts.sum() != self.values.shape[0]:
            raise ValueError("row counts do not match values")
        if np.any(self.counts < 1) or np.any(self.counts > N):
            raise ValueError(f"counts must lie in [1, {N}]")

    @classmethod
    def from_states(cls, states):
        states = list(states)
        if not states:
            raise ValueError("empty batch")
        d, N = states[0].d, states[0].N
        values = np.concatenate([s.components for s in states], axis=0).reshape(-1, d)
        return cls(values, [s.n for s in states], N)

    @property
    def d(self):
        return self.values.shape[1]

    @property
    def size(self):
        return self.counts.size

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.counts)])

    @property
    def segment_ids(self):
        return np.repeat(np.arange(self.size), self.counts)

    @property
    def positions(self):
        """1-based position of every row within its item."""
        off = self.offsets
        return np.arange(self.values.shape[0]) - np.repeat(off[:-1], self.counts) + 1

    def row(self, b, i):
        return self.offsets[b] + i - 1

    def state(self, b):
        off = self.offsets
        return TransState(int(self.counts[b]), self.values[off[b]:off[b + 1]].ravel(), self.d, self.N)

    def states(self):
        return [self.state(b) for b in range(self.size)]

    def copy(self):
        return RaggedBatch(self.values.copy(), self.counts.copy(), self.N)

    def insert(self, b, y_add, i):
        n = self.counts[b]
        if n >= self.N:
            raise CapacityError(f"item {b} already holds N={self.N} components")
        _check_index(i, n + 1)
        self.values = np.insert(self.values, self.row(b, i), np.ravel(y_add), axis=0)
        self.counts[b] += 1

    def delete(self, b, i):
        n = self.counts[b]
        if n <= 1:
            raise UnderflowError(f"item {b} has a single component")
        _check_index(i, n)
        self.values = np.delete(self.values, self.row(b, i), axis=0)
        self.counts[b] -= 1

    def insert_many(self, items, y_add, index):
        """Insert one component into each of the distinct ``items``."""
        items = np.asarray(items, dtype=np.int64)
        if items.size == 0:
            return
        index = np.asarray(index, dtype=np.int64)
        y_add = np.asarray(y_add, dtype=np.float64).reshape(items.size, self.d)
        if np.unique(items).size != items.size:
            raise ValueError("insert_many takes each item at most once")
        n = self.counts[items]
        if np.any(n >= self.N):
            raise CapacityError(f"insertion into an item that already holds N={self.N} components")
        if np.any(index < 1) or np.any(index > n + 1):
            raise IndexError("insertion index out of range")
        order = np.argsort(items, kind="stable")
        rows = self.offsets[items] + index - 1
        self.values = np.insert(self.values, rows[order], y_add[order], axis=0)
        self.counts[items] += 1

    def delete_many(self, items, index):
        items = np.asarray(items, dtype=np.int64)
        if items.size == 0:
            return
        index = np.asarray(index, dtype=np.int64)
        if np.unique(items).size != items.size:
            raise ValueError("delete_many takes each item at most once")
        n = self.counts[items]
        if np.any(n <= 1):
            raise UnderflowError("cannot delete the last remaining component")
        if np.any(index < 1) or np.any(index > n):
            raise IndexError("deletion index out of range")
        self.values = np.delete(self.values, self.offsets[items] + index - 1, axis=0)
        self.counts[items] -= 1
