"""Coalescing flows on the real line.

Arratia's flow is simulated as class representatives with independent
Gaussian increments that stick when adjacent paths cross.  Tanaka's flow is
built from one driving walk ``B`` and independent excursion signs; every
start follows ``x + sgn(x) B`` until ``|x| + B`` reaches 0 and then joins the
origin path.

Cells of a realization are indexed by an integer lattice ``k * step`` so that
restarting a run at an interior node reuses exactly the same randomness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod
from .core import CoalescencePartition, DiscreteMeasure, PartitionError, pushforward
from .stats import mc_mean_ci


def sgn(x):
    """Sign with ``sgn(0) = +1``."""
    return np.where(np.asarray(x) < 0, -1.0, 1.0)


def crossing(gap0: np.ndarray, gap1: np.ndarray, step: float, u: np.ndarray | None):
    """Detect crossings of adjacent paths over one step.

    ``gap0`` and ``gap1`` are the ordered gaps at the start and end of the
    step.  A sign change is a crossing.  If ``u`` is given, a pair whose gap
    stays positive still crosses when ``u < exp(-gap0 * gap1 / step)``, the
    hitting probability of a Brownian bridge of variance 2 per unit time.
    Returns the crossing flags and the interpolated crossing fraction of the
    step.
    """
    hit = gap1 <= 0
    if u is not None:
        with np.errstate(over="ignore"):
            pb = np.exp(-np.maximum(gap0, 0.0) * np.maximum(gap1, 0.0) / step)
        hit = hit | (u < pb)
    denom = gap0 + np.abs(gap1)
    frac = np.divide(gap0, denom, out=np.zeros_like(gap0, dtype=float), where=denom > 0)
    return hit, frac


# ---------------------------------------------------------------------------
# Arratia


@dataclass(frozen=True)
class ArratiaSpec:
    starts: tuple
    horizon: float
    step: float
    bridge_correction: bool = True

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")
        if not np.all(np.isfinite(self.starts)):
            raise ValueError("starts must be finite")
        if not self.horizon >= 0:
            raise ValueError("horizon must be nonnegative")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.step))


@dataclass
class ParticleSystem:
    """Positions of the live classes and their merge history."""

    positions: np.ndarray
    partition: CoalescencePartition
    time: float
    reps: np.ndarray

    def particle_positions(self) -> np.ndarray:
        """Position of every original particle."""
        lab = self.partition.labels()
        cls = {int(c): i for i, c in enumerate(self.class_ids())}
        return self.positions[[cls[int(c)] for c in lab]]

    def class_ids(self) -> np.ndarray:
        """Class label of each entry of ``positions`` (left to right)."""
        return self.partition.labels()[self.reps]


@dataclass
class ArratiaRun:
    """Snapshots of an Arratia particle system.

    ``snapshots`` holds ``(time, class_ids, positions, sizes, labels)`` for
    every recorded time, where ``labels`` gives the class of each original
    particle; ``merges`` lists ``(time, class_a, class_b)``.
    """

    spec: ArratiaSpec
    final: ParticleSystem
    snapshots: list = field(default_factory=list)
    merges: list = field(default_factory=list)
    class_counts: list = field(default_factory=list)


def _arratia_cell(seed: int, k: int, m: int, bridge: bool):
    g = rngmod.stream(seed, "arratia", k)
    z = g.standard_normal(m)
    u = rngmod.stream(seed, "arratia-bridge", k).random(max(m - 1, 0)) if bridge else None
    return z, u


def arratia_simulate(spec: ArratiaSpec, seed: int, start_cell: int = 0,
                     record: Sequence[float] | None = None) -> ArratiaRun:
    """Run the sticky particle system over ``spec.horizon``.

    Cell ``k`` (time ``[k h, (k+1) h]``) hands its i-th Gaussian increment to
    the i-th live class from the left, so the run is a deterministic function
    of ``(seed, cells)`` and the positions at any node.  Adjacent classes that
    cross merge at the midpoint of their endpoints, in increasing order of
    interpolated crossing time.
    """
    h = spec.step
    starts = np.asarray(spec.starts, dtype=float)
    n = starts.size
    part = CoalescencePartition(n)
    t0 = start_cell * h
    order = np.argsort(starts, kind="stable")
    xs = starts[order]
    reps = [int(order[0])] if n else []
    pos = [xs[0]] if n else []
    merges = []
    for i in range(1, n):
        if xs[i] == pos[-1]:
            part.merge(reps[-1], int(order[i]), t0)
            merges.append((t0, min(reps[-1], int(order[i])), max(reps[-1], int(order[i]))))
        else:
            reps.append(int(order[i]))
            pos.append(xs[i])
    reps_arr = np.array(reps, dtype=np.int64)
    pos_arr = np.array(pos, dtype=float)
    rec = sorted(set(float(r) for r in (record or [])))
    run = ArratiaRun(spec, ParticleSystem(pos_arr, part, t0, reps_arr))
    sq = math.sqrt(h)

    def snapshot(t):
        lab = part.labels()
        ids = lab[reps_arr]
        sizes = np.bincount(lab, minlength=n)[ids]
        run.snapshots.append((t, ids.copy(), pos_arr.copy(), sizes, lab))

    ri = 0
    while ri < len(rec) and rec[ri] <= t0 + 1e-12 * max(1.0, abs(t0)):
        snapshot(t0)
        ri += 1
    run.class_counts.append((t0, part.n_classes))
    for j in range(spec.n_steps):
        k = start_cell + j
        t = k * h
        m = pos_arr.size
        z, u = _arratia_cell(seed, k, m, spec.bridge_correction)
        new = pos_arr + sq * z
        if m > 1:
            hit, frac = crossing(np.diff(pos_arr), np.diff(new), h, u)
            if np.any(hit):
                pairs = np.flatnonzero(hit)
                tcross = t + h * frac[pairs]
                group = np.cumsum(np.r_[0, ~hit])
                for q in np.argsort(tcross, kind="stable"):
                    i = int(pairs[q])
                    a, b = int(reps_arr[i]), int(reps_arr[i + 1])
                    if part.merge(a, b, float(tcross[q])):
                        merges.append((float(tcross[q]), min(a, b), max(a, b)))
                new, reps_arr = _collapse(new, reps_arr, group)
                new, reps_arr = _resolve_order(new, reps_arr, part, t + h, merges)
        pos_arr = new
        before = run.class_counts[-1][1]
        if part.n_classes > before:
            raise PartitionError("class count increased")
        run.class_counts.append((t + h, part.n_classes))
        while ri < len(rec) and rec[ri] <= t + h + 1e-12 * max(1.0, abs(t + h)):
            snapshot(t + h)
            ri += 1
    run.final = ParticleSystem(pos_arr, part, (start_cell + spec.n_steps) * h, reps_arr)
    run.merges = merges
    return run


def _collapse(new: np.ndarray, reps: np.ndarray, group: np.ndarray):
    """One position per merged run of adjacent classes (midpoint of its extremes)."""
    starts = np.flatnonzero(np.r_[True, group[1:] != group[:-1]])
    ends = np.r_[starts[1:], group.size]
    pos = np.array([0.5 * (new[a:b].min() + new[a:b].max()) for a, b in zip(starts, ends)])
    return pos, reps[starts]


def _resolve_order(pos, reps, part, t, merges):
    """Merge neighbours left out of order after collapsing (they crossed)."""
    while pos.size > 1:
        bad = np.flatnonzero(np.diff(pos) <= 0)
        if bad.size == 0:
            break
        i = int(bad[0])
        a, b = int(reps[i]), int(reps[i + 1])
        if part.merge(a, b, t):
            merges.append((t, min(a, b), max(a, b)))
        mid = 0.5 * (pos[i] + pos[i + 1])
        pos = np.r_[pos[:i], mid, pos[i + 2:]]
        reps = np.r_[reps[:i + 1], reps[i + 2:]]
    return pos, reps


def arratia_merge_times(gap: float, horizon: float, step: float, replicas: int, seed: int,
                        bridge: bool = True, threads: int = 1) -> np.ndarray:
    """Merge times of two particles started ``gap`` apart (``inf`` if none).

    Vectorized over replicas with the same crossing rule as
    :func:`arratia_simulate`; each replica chunk owns one stream.
    """
    n_steps = int(round(horizon / step))
    sq = math.sqrt(step)

    def job(g, size, _):
        x = np.zeros(size)
        y = np.full(size, float(gap))
        tm = np.full(size, np.inf)
        if gap <= 0:
            return np.zeros(size)
        live = np.arange(size)
        for j in range(n_steps):
            if live.size == 0:
                break
            z = g.standard_normal((2, live.size))
            u = g.random(live.size) if bridge else None
            nx = x[live] + sq * z[0]
            ny = y[live] + sq * z[1]
            hit, frac = crossing(y[live] - x[live], ny - nx, step, u)
            tm[live[hit]] = (j + frac[hit]) * step
            x[live], y[live] = nx, ny
            live = live[~hit]
        return tm

    return np.concatenate(rngmod.run_chunks(job, replicas, seed, ("arratia-pair", step), threads))


def arratia_merge_cdf(r: float, t):
    """``P[merged by t] = 2 (1 - Phi(r / sqrt(2 t)))``."""
    from scipy.special import erfc

    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(t > 0, erfc(r / (2.0 * np.sqrt(np.maximum(t, 1e-300)))), 0.0)


# ---------------------------------------------------------------------------
# Tanaka


@dataclass(frozen=True)
class TanakaSpec:
    starts: tuple
    horizon: float
    step: float

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.step))


@dataclass
class TanakaRun:
    """Grid paths of one Tanaka realization.

    ``paths[i, k]`` is ``X^{x_i}`` at node ``k``; ``origin`` is the path from
    0; ``W`` is the driving walk with ``W_0 = 0``; ``tau[i]`` is the node
    index at which ``|x_i| + W`` first reaches 0 (``n_steps + 1`` if never).
    """

    times: np.ndarray
    W: np.ndarray
    origin: np.ndarray
    paths: np.ndarray
    tau: np.ndarray
    partition: CoalescencePartition


def _tanaka_driver(seed: int, start_cell: int, n_steps: int, step: float):
    dB = np.empty(n_steps)
    signs = np.empty(n_steps + 1)
    sq = math.sqrt(step)
    for j in range(n_steps + 1):
        g = rngmod.stream(seed, "tanaka", start_cell + j)
        z = g.standard_normal()
        signs[j] = 1.0 if g.random() < 0.5 else -1.0
        if j < n_steps:
            dB[j] = sq * z
    return dB, signs


def origin_path(B: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """``eps_{a(k)} (B_k - min_{j<=k} B_j)`` with ``a(k)`` the last argmin."""
    m = np.minimum.accumulate(B)
    k = np.arange(B.size)
    prev = np.r_[np.inf, m[:-1]]
    a = np.maximum.accumulate(np.where(B <= prev, k, 0))
    return signs[a] * (B - m)


def tanaka_paths(starts: np.ndarray, B: np.ndarray, signs: np.ndarray):
    """Grid paths of every start driven by ``B`` (``B[0] = 0``)."""
    X = origin_path(B, signs)
    starts = np.asarray(starts, dtype=float)
    K = B.size
    paths = np.empty((starts.size, K))
    tau = np.empty(starts.size, dtype=np.int64)
    for i, x in enumerate(starts):
        R = abs(x) + B
        hitk = np.flatnonzero(R <= 0)
        ti = int(hitk[0]) if hitk.size else K
        tau[i] = ti
        paths[i, :ti] = x + sgn(x) * B[:ti]
        paths[i, ti:] = X[ti:]
    return X, paths, tau


def tanaka_coalescing(spec: TanakaSpec, seed: int, start_cell: int = 0) -> TanakaRun:
    """One realization of the coalescing Tanaka flow on the lattice of ``spec.step``.

    Cell ``k`` supplies the driving increment and the excursion sign of node
    ``k``; starts at equal positions share a class from the outset and every
    start joins the origin class at its hitting node.
    """
    h = spec.step
    n = spec.n_steps
    dB, signs = _tanaka_driver(seed, start_cell, n, h)
    B = np.r_[0.0, np.cumsum(dB)]
    X, paths, tau = tanaka_paths(np.asarray(spec.starts, float), B, signs)
    times = (start_cell + np.arange(n + 1)) * h
    starts = np.asarray(spec.starts, dtype=float)
    part = CoalescencePartition(starts.size)
    t0 = times[0]
    for i in range(starts.size):
        for j in range(i):
            if starts[j] == starts[i]:
                part.merge(j, i, t0)
                break
    hitters = sorted((int(tau[i]), i) for i in range(starts.size) if tau[i] <= n)
    lead = None
    for k, i in hitters:
        if lead is None:
            lead = i
        else:
            part.merge(lead, i, times[k])
    return TanakaRun(times, B, X, paths, tau, part)


@dataclass
class TanakaBatch:
    """Terminal quantities of many independent replicas at one start."""

    X: np.ndarray
    W: np.ndarray
    R: np.ndarray
    hit: np.ndarray
    x: float

    def S(self, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Wiener-solution kernel ``S_t f(x)`` for each replica."""
        before = f(sgn(self.x) * self.R)
        after = 0.5 * (f(self.R) + f(-self.R))
        return np.where(self.hit, after, before)


def tanaka_batch(x: float, t: float, level: int, replicas: int, seed: int,
                 threads: int = 1, key: Sequence[int | str] = ("tanaka-batch",)) -> TanakaBatch:
    """``X_t^x``, ``W_t``, the reflected path ``R_t`` and ``1{T_x <= t}`` per replica.

    The grid step is ``t 2^-level``.  Only the terminal excursion sign is
    drawn, which has the same law as drawing one sign per node.
    """
    n = 1 << level
    sq = math.sqrt(t / n)
    block = 1024
    ax = abs(x)

    def job(g, size, _):
        B = np.zeros(size)
        m = np.zeros(size)
        hit = np.full(size, ax == 0.0)
        done = 0
        while done < n:
            w = min(block, n - done)
            inc = sq * g.standard_normal((size, w))
            path = B[:, None] + np.cumsum(inc, axis=1)
            hit |= (ax + path.min(axis=1)) <= 0
            m = np.minimum(m, path.min(axis=1))
            B = path[:, -1]
            done += w
        eps = np.where(g.random(size) < 0.5, -1.0, 1.0)
        R = np.where(hit, B - m, ax + B)
        X = np.where(hit, eps * R, sgn(x) * R)
        return np.stack([X, B, R, hit.astype(float)])

    out = np.concatenate(rngmod.run_chunks(job, replicas, seed, (*key, level), threads), axis=1)
    return TanakaBatch(out[0], out[1], out[2], out[3].astype(bool), float(x))


@dataclass
class WienerKernelEstimate:
    mean: float
    mean_se: float
    second: float
    second_se: float
    heat: float
    heat_sq: float


def heat_value(f: Callable[[np.ndarray], np.ndarray], x: float, t: float, nodes: int = 80) -> float:
    """``E[f(x + B_t)]`` by Gauss-Hermite quadrature."""
    z, w = np.polynomial.hermite_e.hermegauss(nodes)
    return float(np.sum(w * f(x + math.sqrt(t) * z)) / math.sqrt(2 * math.pi))


def tanaka_wiener_kernel(x: float, t: float, f: Callable[[np.ndarray], np.ndarray],
                         replicas: int, seed: int, level: int = 10,
                         threads: int = 1) -> WienerKernelEstimate:
    """Moments of ``S_t f(x)`` with the heat-semigroup values for comparison."""
    if t == 0:
        v = float(f(np.array([x]))[0])
        return WienerKernelEstimate(v, 0.0, v * v, 0.0, v, v * v)
    b = tanaka_batch(x, t, level, replicas, seed, threads, ("tanaka-kernel",))
    s = b.S(f)
    m1, e1 = mc_mean_ci(s)
    m2, e2 = mc_mean_ci(s * s)
    return WienerKernelEstimate(m1, e1, m2, e2, heat_value(f, x, t),
                                heat_value(lambda y: f(y) ** 2, x, t))


# ---------------------------------------------------------------------------
# atomicity


@dataclass(frozen=True)
class AtomRow:
    time: float
    n_atoms: int
    max_mass: float
    residual: float


def atom_statistics(mu0: DiscreteMeasure, flow: str, times: Sequence[float], seed: int,
                    step: float = 1e-5, bridge: bool = True) -> list[AtomRow]:
    """Push ``mu0`` through one coalescing realization and count atoms."""
    if mu0.n_atoms < 100:
        raise ValueError("need at least 100 atoms")
    times = sorted(float(t) for t in times)
    mass0 = mu0.total_mass
    rows = []
    if flow == "arratia":
        spec = ArratiaSpec(tuple(mu0.positions), times[-1], step, bridge)
        run = arratia_simulate(spec, seed, record=times)
        for t, ids, pos, _, lab in run.snapshots:
            where = {int(c): i for i, c in enumerate(ids)}
            img = pos[[where[int(c)] for c in lab]]
            nu = pushforward(mu0, lambda p, img=img: img)
            rows.append(AtomRow(t, nu.n_atoms, float(nu.weights.max()), abs(nu.total_mass - mass0)))
    elif flow == "tanaka":
        spec = TanakaSpec(tuple(mu0.positions), times[-1], step)
        run = tanaka_coalescing(spec, seed)
        for t in times:
            k = int(round(t / step))
            nu = pushforward(mu0, lambda p, k=k: run.paths[:, k])
            rows.append(AtomRow(t, nu.n_atoms, float(nu.weights.max()), abs(nu.total_mass - mass0)))
    else:
        raise ValueError("flow must be 'arratia' or 'tanaka'")
    return rows
