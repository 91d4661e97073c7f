"""Shared flow abstractions on finite grids.

A flow is stored as one increment per grid cell.  Map increments are integer
arrays ``phi`` with ``phi[x]`` the image of state ``x``; kernel increments are
:class:`FiniteKernel` objects.  Composition follows the cocycle convention
``K_{s,t} = K_{s,u} K_{u,t}``: apply the left increment first, then the right.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .stats import StatsError, mc_mean_ci

ROW_TOL = 1e-12
REAL_MERGE_TOL = 1e-9


class GridError(ValueError):
    """Raised when flows or intervals do not line up on a common grid."""


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class TimeGrid:
    """Dyadic grid on ``[origin, horizon]`` with ``2**level`` cells."""

    origin: float
    horizon: float
    level: int = 0

    def __post_init__(self):
        if not self.horizon > self.origin:
            raise GridError("horizon must exceed origin")
        if self.level < 0:
            raise GridError("level must be nonnegative")

    @property
    def n_cells(self) -> int:
        return 1 << self.level

    @property
    def step(self) -> float:
        return (self.horizon - self.origin) / self.n_cells

    def times(self) -> np.ndarray:
        """Grid nodes ``s + k 2^-n (t - s)``."""
        k = np.arange(self.n_cells + 1)
        return self.origin + k * (self.horizon - self.origin) / self.n_cells

    def refine(self) -> "TimeGrid":
        return TimeGrid(self.origin, self.horizon, self.level + 1)

    def node(self, k: int) -> float:
        return self.origin + k * (self.horizon - self.origin) / self.n_cells


# ---------------------------------------------------------------------------
# kernels


def _as_row_stochastic(m: np.ndarray) -> np.ndarray:
    m = np.array(m, dtype=float)
    if m.ndim != 2:
        raise ValueError("kernel must be a 2-d table")
    if np.any(m < 0):
        raise ValueError("kernel entries must be nonnegative")
    sums = m.sum(axis=1)
    dev = np.abs(sums - 1.0)
    if np.any(dev > ROW_TOL):
        bad = int(np.argmax(dev))
        raise ValueError(f"row {bad} sums to {sums[bad]!r}, not 1")
    if np.any(dev > 0):
        m = m / sums[:, None]
    m.setflags(write=False)
    return m


@dataclass(frozen=True, eq=False)
class FiniteKernel:
    """Row-stochastic transition table on ``{0, ..., n-1}``.

    Rows within ``1e-12`` of summing to one are renormalized; anything
    further off is rejected.  ``states`` optionally carries display labels.
    """

    matrix: np.ndarray
    states: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "matrix", _as_row_stochastic(self.matrix))
        if self.matrix.shape[0] != self.matrix.shape[1]:
            raise ValueError("kernel must be square")
        if self.states is not None and len(self.states) != self.matrix.shape[0]:
            raise ValueError("state labels do not match the table size")

    @property
    def n_states(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def identity(cls, n: int) -> "FiniteKernel":
        return cls(np.eye(n))

    @classmethod
    def from_map(cls, phi: Sequence[int], n: int | None = None) -> "FiniteKernel":
        """Deterministic kernel ``x -> delta_{phi(x)}``."""
        phi = np.asarray(phi, dtype=np.int64)
        n = phi.size if n is None else n
        m = np.zeros((phi.size, n))
        m[np.arange(phi.size), phi] = 1.0
        return cls(m)

    @classmethod
    def uniform(cls, n: int) -> "FiniteKernel":
        return cls(np.full((n, n), 1.0 / n))

    def compose(self, other: "FiniteKernel") -> "FiniteKernel":
        """``self`` then ``other``: the product ``self @ other``."""
        if other.n_states != self.n_states:
            raise ValueError("state spaces differ")
        return FiniteKernel(self.matrix @ other.matrix, self.states)

    def __matmul__(self, other: "FiniteKernel") -> "FiniteKernel":
        return self.compose(other)

    def act(self, f: Sequence[float]) -> np.ndarray:
        return kernel_action(self, f)

    def is_delta(self) -> bool:
        return bool(np.all((self.matrix == 0) | (self.matrix == 1)))

    def as_map(self) -> np.ndarray:
        if not self.is_delta():
            raise ValueError("kernel is not deterministic")
        return np.argmax(self.matrix, axis=1)

    def power(self, k: int) -> "FiniteKernel":
        return FiniteKernel(np.linalg.matrix_power(self.matrix, k), self.states)


def kernel_action(K, f: Sequence[float]) -> np.ndarray:
    """``(K f)(x) = sum_y K(x, y) f(y)``.

    ``K`` may be a :class:`FiniteKernel`, a square array or a
    :class:`FlowRealization` (its composed kernel over the whole grid).
    """
    if isinstance(K, FlowRealization):
        K = K.kernel()
    m = K.matrix if isinstance(K, FiniteKernel) else np.asarray(K, dtype=float)
    f = np.asarray(f, dtype=float)
    if f.shape[0] != m.shape[1]:
        raise ValueError(f"test function has {f.shape[0]} values, kernel has {m.shape[1]} states")
    return m @ f


# ---------------------------------------------------------------------------
# realized flows


@dataclass(frozen=True)
class Event:
    """A Poisson event inside a cell: time, drawn map index and its mark."""

    time: float
    map_index: int
    mark: int = 1


@dataclass(frozen=True, eq=False)
class FlowRealization:
    """Cell-indexed family of realized increments.

    ``times`` holds the grid nodes (``len(increments) + 1`` of them).  The
    object is immutable and can be shared between threads.
    """

    times: tuple
    kind: str
    increments: tuple
    n_states: int
    seed: tuple = ()
    events: tuple | None = None
    law: object | None = None

    def __post_init__(self):
        if self.kind not in ("map", "kernel"):
            raise ValueError("kind must be 'map' or 'kernel'")
        if len(self.times) != len(self.increments) + 1:
            raise GridError("need one increment per cell")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise GridError("grid nodes must increase")
        for inc in self.increments:
            if self.kind == "map":
                inc.setflags(write=False)

    @property
    def n_cells(self) -> int:
        return len(self.increments)

    @property
    def origin(self) -> float:
        return self.times[0]

    @property
    def horizon(self) -> float:
        return self.times[-1]

    def identity(self):
        if self.kind == "map":
            return np.arange(self.n_states)
        return FiniteKernel.identity(self.n_states)

    def between(self, i: int, j: int):
        """Composed increment over cells ``i .. j-1`` (identity when empty)."""
        if not 0 <= i <= j <= self.n_cells:
            raise GridError("cell range outside the grid")
        if self.kind == "map":
            out = np.arange(self.n_states)
            for inc in self.increments[i:j]:
                out = inc[out]
            return out
        m = np.eye(self.n_states)
        for inc in self.increments[i:j]:
            m = m @ inc.matrix
        return FiniteKernel(m)

    def index_of(self, t: float) -> int:
        for k, node in enumerate(self.times):
            if node == t:
                return k
        raise GridError(f"time {t!r} is not a grid node")

    def over(self, s: float, t: float):
        return self.between(self.index_of(s), self.index_of(t))

    def total(self):
        return self.between(0, self.n_cells)

    def kernel(self) -> FiniteKernel:
        tot = self.total()
        if self.kind == "map":
            return FiniteKernel.from_map(tot, self.n_states)
        return tot

    def evaluate(self, x: int) -> int:
        if self.kind != "map":
            raise TypeError("evaluate needs a map flow")
        return int(self.total()[x])

    def restrict(self, i: int, j: int) -> "FlowRealization":
        ev = None if self.events is None else self.events[i:j]
        return FlowRealization(tuple(self.times[i:j + 1]), self.kind, self.increments[i:j],
                               self.n_states, self.seed, ev, self.law)


def compose_flow(left: FlowRealization, right: FlowRealization) -> FlowRealization:
    """Concatenate abutting realizations into one over the joined window."""
    if left.times[-1] != right.times[0]:
        raise GridError(f"grids do not abut: {left.times[-1]!r} vs {right.times[0]!r}")
    if left.kind != right.kind:
        raise TypeError("cannot compose a map flow with a kernel flow")
    if left.n_states != right.n_states:
        raise GridError("state spaces differ")
    ev = None
    if left.events is not None and right.events is not None:
        ev = left.events + right.events
    return FlowRealization(left.times + right.times[1:], left.kind,
                           left.increments + right.increments, left.n_states,
                           left.seed + right.seed, ev, left.law)


def sample_conditional_paths(flow: FlowRealization, x: int, n_paths: int,
                             rng: np.random.Generator) -> np.ndarray:
    """Paths that step through the frozen per-cell kernels.

    Returns an ``(n_paths, n_cells + 1)`` integer array.  Given the flow,
    paths are independent and ``mean(f(X_t))`` estimates ``K_{0,t} f(x)``.
    """
    if not 0 <= x < flow.n_states:
        raise ValueError(f"state {x} outside the state space")
    out = np.empty((n_paths, flow.n_cells + 1), dtype=np.int64)
    out[:, 0] = x
    cur = np.full(n_paths, x, dtype=np.int64)
    for k, inc in enumerate(flow.increments):
        if flow.kind == "map":
            cur = inc[cur]
        else:
            cum = np.cumsum(inc.matrix, axis=1)
            u = rng.random(n_paths)
            cur = np.minimum((u[:, None] >= cum[cur]).sum(axis=1), flow.n_states - 1)
        out[:, k + 1] = cur
    return out


def tensor_action(kernels: np.ndarray, points: Sequence[int], f: np.ndarray) -> np.ndarray:
    """``K^{(x) n} f(points)`` for a batch of kernels of shape ``(R, S, S)``."""
    f = np.asarray(f, dtype=float)
    n = len(points)
    if f.ndim != n:
        raise ValueError("test function arity must match the number of points")
    rows = kernels[:, points[0], :]
    acc = np.tensordot(rows, f, axes=([1], [0]))
    for p in points[1:]:
        rows = kernels[:, p, :]
        acc = np.einsum("rs,rs...->r...", rows, acc)
    return acc


def empirical_semigroup(
    flow_sampler: Callable[[np.random.Generator, float, int], np.ndarray],
    points: Sequence[int],
    f: np.ndarray,
    t: float,
    replicas: int,
    seed: int,
    threads: int = 1,
    key: Sequence[int | str] = ("semigroup",),
) -> tuple[float, float]:
    """Monte Carlo estimate of ``E[K_{0,t}^{(x) n} f(points)]`` with its stderr.

    ``flow_sampler(rng, t, size)`` must return ``size`` independent kernels
    ``K_{0,t}`` as an ``(size, S, S)`` array.
    """
    if replicas < 2:
        raise StatsError("replicas must be at least 2")
    f = np.asarray(f, dtype=float)
    if t == 0:
        return float(f[tuple(points)]), 0.0

    def job(g, size, _):
        return tensor_action(flow_sampler(g, t, size), points, f)

    parts = rngmod.run_chunks(job, replicas, seed, key, threads)
    return mc_mean_ci(np.concatenate(parts))


# ---------------------------------------------------------------------------
# coalescence bookkeeping


class PartitionError(RuntimeError):
    """Raised when a merge-only partition would be violated."""


class CoalescencePartition:
    """Merge-only equivalence classes over ``{0, ..., n-1}`` (union-find).

    Merges carry a time stamp and must arrive in nondecreasing time order.
    There is no split operation.
    """

    def __init__(self, n: int):
        self.n = n
        self._parent = list(range(n))
        self._size = [1] * n
        self.merge_times: list[tuple[float, int, int]] = []
        self._count = n

    def find(self, a: int) -> int:
        p = self._parent
        root = a
        while p[root] != root:
            root = p[root]
        while p[a] != root:
            p[a], a = root, p[a]
        return root

    def same(self, a: int, b: int) -> bool:
        return self.find(a) == self.find(b)

    def merge(self, a: int, b: int, time: float) -> bool:
        """Join the classes of ``a`` and ``b``; returns False if already joined."""
        if self.merge_times and time < self.merge_times[-1][0]:
            raise PartitionError("merge times must be nondecreasing")
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        before = self._count
        if self._size[ra] < self._size[rb]:
            ra, rb = rb, ra
        self._parent[rb] = ra
        self._size[ra] += self._size[rb]
        self._count -= 1
        if self._count >= before:
            raise PartitionError("class count failed to drop on merge")
        self.merge_times.append((float(time), min(a, b), max(a, b)))
        return True

    @property
    def n_classes(self) -> int:
        return self._count

    def labels(self) -> np.ndarray:
        """Class label per element: the smallest member of its class."""
        roots = np.array([self.find(i) for i in range(self.n)])
        first: dict[int, int] = {}
        for i, r in enumerate(roots):
            first.setdefault(int(r), i)
        return np.array([first[int(r)] for r in roots], dtype=np.int64)

    def classes(self) -> list[list[int]]:
        groups: dict[int, list[int]] = {}
        for i in range(self.n):
            groups.setdefault(self.find(i), []).append(i)
        return sorted(groups.values())


# ---------------------------------------------------------------------------
# atomic measures


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finite sum of weighted point masses."""

    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions)
        w = np.asarray(self.weights, dtype=float)
        if pos.shape[0] != w.shape[0]:
            raise ValueError("positions and weights differ in length")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)

    @property
    def n_atoms(self) -> int:
        return int(self.weights.size)

    @property
    def total_mass(self) -> float:
        return math.fsum(self.weights)

    @classmethod
    def uniform_grid(cls, n: int, a: float = 0.0, b: float = 1.0) -> "DiscreteMeasure":
        """``n`` equal atoms at cell midpoints of ``[a, b]``; approximates Lebesgue."""
        x = a + (np.arange(n) + 0.5) * (b - a) / n
        return cls(x, np.full(n, (b - a) / n))


def pushforward(mu: DiscreteMeasure, phi, tol: float | None = None) -> DiscreteMeasure:
    """Image measure under ``phi``; colliding atoms have their weights summed.

    ``phi`` is a callable on the position array or, for finite states, an
    integer lookup table.  Integer positions merge on equality; real positions
    merge when within ``tol`` (default ``1e-9``).
    """
    if callable(phi):
        img = np.asarray(phi(mu.positions))
    else:
        img = np.asarray(phi)[np.asarray(mu.positions)]
    if img.shape[0] != mu.n_atoms:
        raise ValueError("map output does not match the atom count")
    if mu.n_atoms == 0:
        return DiscreteMeasure(img, mu.weights)
    order = np.argsort(img, kind="stable")
    xs, ws = img[order], mu.weights[order]
    if np.issubdtype(xs.dtype, np.integer):
        new = np.r_[True, xs[1:] != xs[:-1]]
    else:
        tol = REAL_MERGE_TOL if tol is None else tol
        new = np.r_[True, np.diff(xs) > tol]
    starts = np.flatnonzero(new)
    bounds = np.r_[starts, xs.size]
    weights = np.array([math.fsum(ws[a:b]) for a, b in zip(bounds[:-1], bounds[1:])])
    return DiscreteMeasure(xs[starts], weights)
