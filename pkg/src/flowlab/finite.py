"""Poisson-driven flows on finite state spaces.

Covers the two-state example (maps ``f0, f1, I, sigma`` with equal weights),
its kernel-valued variant with resampling marks, exact n-point semigroups of
jump chains, the coalescing-chain construction, filtering, and exact
stationary sampling by coupling from the past.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng as rngmod
from .core import Event, FiniteKernel, FlowRealization, TimeGrid
from .stats import ExperimentReport, mc_mean_ci

TAYLOR_TOL = 1e-13


# ---------------------------------------------------------------------------
# laws and specs


@dataclass(frozen=True, eq=False)
class RandomMapLaw:
    """Finite mixture of maps on ``{0, ..., S-1}``.

    ``maps[k]`` is the image table of the k-th map.
    """

    maps: np.ndarray
    probs: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        maps = np.array(self.maps, dtype=np.int64)
        probs = np.array(self.probs, dtype=float)
        if maps.ndim != 2 or maps.shape[0] != probs.size:
            raise ValueError("need one probability per map")
        s = maps.shape[1]
        if maps.size and (maps.min() < 0 or maps.max() >= s):
            raise ValueError("every map must send the state space into itself")
        if np.any(probs < 0) or abs(probs.sum() - 1) > 1e-12:
            raise ValueError("map probabilities must be nonnegative and sum to 1")
        probs = probs / probs.sum()
        maps.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "probs", probs)

    @property
    def n_states(self) -> int:
        return self.maps.shape[1]

    @property
    def n_maps(self) -> int:
        return self.maps.shape[0]

    def mean_kernel(self) -> FiniteKernel:
        """``E[delta_phi]``, the one-jump transition table."""
        s = self.n_states
        m = np.zeros((s, s))
        for phi, p in zip(self.maps, self.probs):
            m[np.arange(s), phi] += p
        return FiniteKernel(m)

    def n_point_table(self, n: int) -> FiniteKernel:
        """Jump table of the n-point motion on tuples in product order."""
        s = self.n_states
        tuples = np.array(list(itertools.product(range(s), repeat=n)), dtype=np.int64)
        idx = np.ravel_multi_index(tuples.T, (s,) * n)
        m = np.zeros((s**n, s**n))
        for phi, p in zip(self.maps, self.probs):
            img = np.ravel_multi_index(phi[tuples].T, (s,) * n)
            m[idx, img] += p
        return FiniteKernel(m)

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.choice(self.n_maps, size=size, p=self.probs)


def two_state_law() -> RandomMapLaw:
    """``1/4 (f0 + f1 + I + sigma)`` on ``{0, 1}``."""
    return RandomMapLaw([[0, 0], [1, 1], [0, 1], [1, 0]], [0.25] * 4, ("f0", "f1", "I", "sigma"))


@dataclass(frozen=True)
class PoissonFlowSpec:
    """Rate, map law and optional kernel mixture ``(p, resample_kernel)``."""

    rate: float
    map_law: RandomMapLaw
    p: float | None = None
    resample_kernel: FiniteKernel | None = None

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        if self.p is not None:
            if not 0 <= self.p <= 1:
                raise ValueError("p must lie in [0, 1]")
            if self.resample_kernel is None:
                object.__setattr__(self, "resample_kernel", self.map_law.mean_kernel())

    @property
    def has_kernel_mix(self) -> bool:
        return self.p is not None


def two_state_spec(p: float | None = None, rate: float = 1.0) -> PoissonFlowSpec:
    """The two-state example; ``p`` enables the kernel mixture with ``(d0 + d1)/2``."""
    return PoissonFlowSpec(rate, two_state_law(), p,
                           FiniteKernel.uniform(2) if p is not None else None)


@dataclass(frozen=True, eq=False)
class JumpChainSpec:
    """Rate-``rate`` Poisson chain with per-event table ``joint`` on n-tuples.

    ``joint`` defaults to the product ``one_jump^{(x) n}`` (independent
    coordinates jumping at common event times).
    """

    one_jump: FiniteKernel
    n: int = 1
    joint: FiniteKernel | None = None
    rate: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.joint is None:
            m = self.one_jump.matrix
            prod = m
            for _ in range(self.n - 1):
                prod = np.kron(prod, m)
            object.__setattr__(self, "joint", FiniteKernel(prod))
        if self.joint.n_states != self.one_jump.n_states ** self.n:
            raise ValueError("joint table size does not match n and the state count")

    @property
    def n_states(self) -> int:
        return self.one_jump.n_states

    def tuples(self) -> np.ndarray:
        return np.array(list(itertools.product(range(self.n_states), repeat=self.n)))

    def index(self, point: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(point), (self.n_states,) * self.n))


def two_state_chain(n: int = 1, p: float = 1.0) -> JumpChainSpec:
    """Exact n-point chain of the two-state kernel flow with mixture weight ``p``.

    ``p = 1`` gives the map flow; general ``p`` mixes the map table with
    the product of independent uniform resamplings.
    """
    law = two_state_law()
    coal = law.n_point_table(n).matrix
    unif = np.full_like(coal, 1.0 / coal.shape[0])
    return JumpChainSpec(law.mean_kernel(), n, FiniteKernel(p * coal + (1 - p) * unif))


# ---------------------------------------------------------------------------
# single realizations


def _cell_events(spec: PoissonFlowSpec, s: float, t: float, seed, k: int):
    if isinstance(seed, np.random.Generator):
        g = mg = seed
    else:
        g = rngmod.cell_stream(seed, s, t, "poisson-maps")
        mg = rngmod.cell_stream(seed, s, t, "poisson-marks")
    count = int(g.poisson(spec.rate * (t - s)))
    times = np.sort(g.uniform(s, t, count))
    idx = spec.map_law.draw(g, count)
    if spec.p is None:
        marks = np.ones(count, dtype=np.int64)
    else:
        marks = (mg.random(count) < spec.p).astype(np.int64)
    return tuple(Event(float(a), int(b), int(c)) for a, b, c in zip(times, idx, marks))


def simulate_map_flow(spec: PoissonFlowSpec, window: tuple[float, float], seed,
                      level: int = 0) -> FlowRealization:
    """Realize ``phi_{s,t}`` on a dyadic grid over ``window``.

    Each cell has its own Poisson event stream keyed by the cell endpoints
    (or, when ``seed`` is a Generator, draws sequentially from it).  Events
    carry their mark ``Y`` when ``spec.p`` is set so the flow can be filtered.
    """
    grid = TimeGrid(window[0], window[1], level)
    nodes = grid.times()
    maps = spec.map_law.maps
    incs, evs = [], []
    s_ = spec.map_law.n_states
    for k in range(grid.n_cells):
        ev = _cell_events(spec, float(nodes[k]), float(nodes[k + 1]), seed, k)
        phi = np.arange(s_)
        for e in ev:
            phi = maps[e.map_index][phi]
        incs.append(phi)
        evs.append(ev)
    seed_rec = (("seed", None if isinstance(seed, np.random.Generator) else int(seed)),)
    return FlowRealization(tuple(float(x) for x in nodes), "map", tuple(incs), s_,
                           seed_rec, tuple(evs), spec)


def _kernel_from_events(events, spec: PoissonFlowSpec, replacement: FiniteKernel) -> FiniteKernel:
    s_ = spec.map_law.n_states
    m = np.eye(s_)
    for e in events:
        if e.mark:
            m = m @ FiniteKernel.from_map(spec.map_law.maps[e.map_index], s_).matrix
        else:
            m = m @ replacement.matrix
    return FiniteKernel(m)


def simulate_kernel_flow(spec: PoissonFlowSpec, window: tuple[float, float], seed,
                         level: int = 0) -> FlowRealization:
    """Kernel flow: per event ``delta_phi`` with probability p, else the resample kernel."""
    if not spec.has_kernel_mix:
        raise ValueError("kernel flow needs a kernel mixture (p and resample kernel)")
    base = simulate_map_flow(spec, window, seed, level)
    incs = tuple(_kernel_from_events(ev, spec, spec.resample_kernel) for ev in base.events)
    return FlowRealization(base.times, "kernel", incs, base.n_states, base.seed, base.events, spec)


def filter_flow(flow: FlowRealization) -> FlowRealization:
    """Condition a marked map flow on the subnoise generated by the marks.

    Events with ``Y = 1`` keep ``delta_phi``; events with ``Y = 0`` become
    ``E[delta_phi]``, the mean kernel of the map law (computed exactly).
    """
    if flow.kind != "map" or flow.events is None or flow.law is None:
        raise ValueError("filtering needs a map flow carrying its events and law")
    spec = flow.law
    if spec.p is None:
        raise ValueError("events carry no marks")
    mean = spec.map_law.mean_kernel()
    incs = tuple(_kernel_from_events(ev, spec, mean) for ev in flow.events)
    return FlowRealization(flow.times, "kernel", incs, flow.n_states, flow.seed, flow.events, spec)


# ---------------------------------------------------------------------------
# batched sampling over many independent windows


@dataclass
class FlowBatch:
    """``size`` independent realizations of ``F_{0,t}``."""

    counts: np.ndarray
    first_map: np.ndarray
    first_mark: np.ndarray
    maps: np.ndarray
    kernels: np.ndarray | None = None
    filtered: np.ndarray | None = None


def sample_flow_batch(spec: PoissonFlowSpec, t: float, size: int,
                      rng: np.random.Generator) -> FlowBatch:
    """Vectorized realization of many windows of length ``t``.

    Returns composed maps, and if the flow has a kernel mixture also the
    kernel flow (resample kernel on ``Y = 0``) and the filtered map flow
    (mean kernel on ``Y = 0``), all built from the same events.
    """
    law = spec.map_law
    s_ = law.n_states
    counts = rng.poisson(spec.rate * t, size)
    kmax = int(counts.max()) if size else 0
    idx = rng.choice(law.n_maps, size=(size, kmax), p=law.probs)
    if spec.p is None:
        marks = np.ones((size, kmax), dtype=np.int64)
    else:
        marks = (rng.random((size, kmax)) < spec.p).astype(np.int64)
    cur = np.tile(np.arange(s_), (size, 1))
    rows = np.arange(size)[:, None]
    kern = filt = None
    if spec.p is not None:
        deltas = np.zeros((law.n_maps, s_, s_))
        for m in range(law.n_maps):
            deltas[m, np.arange(s_), law.maps[m]] = 1.0
        kern = np.tile(np.eye(s_), (size, 1, 1))
        filt = kern.copy()
        res = spec.resample_kernel.matrix
        mean = law.mean_kernel().matrix
    for k in range(kmax):
        active = counts > k
        img = law.maps[idx[:, k]]
        cur = np.where(active[:, None], img[rows, cur], cur)
        if spec.p is not None:
            y = (marks[:, k] == 1)[:, None, None]
            step_k = np.where(y, deltas[idx[:, k]], res)
            step_f = np.where(y, deltas[idx[:, k]], mean)
            a = active[:, None, None]
            kern = np.where(a, kern @ step_k, kern)
            filt = np.where(a, filt @ step_f, filt)
    first_map = np.where(counts > 0, idx[:, 0] if kmax else -1, -1)
    first_mark = np.where(counts > 0, marks[:, 0] if kmax else -1, -1)
    return FlowBatch(counts, first_map, first_mark, cur, kern, filt)


def map_kernels(maps: np.ndarray, n_states: int) -> np.ndarray:
    """Delta kernels ``(R, S, S)`` of a batch of maps ``(R, S)``."""
    out = np.zeros((maps.shape[0], n_states, n_states))
    r = np.arange(maps.shape[0])[:, None]
    out[r, np.arange(n_states)[None, :], maps] = 1.0
    return out


# ---------------------------------------------------------------------------
# exact semigroups and chain constructions


def expm_generator(jump: np.ndarray, rate: float, t: float) -> np.ndarray:
    """``exp(rate t (J - I))`` by scaling and squaring a truncated Taylor series.

    Terms are added until the tail bound ``a^(m+1)/(m+1)! / (1 - a/(m+2))``
    drops below ``1e-13 / 2^k`` where ``a`` is the scaled norm and ``k`` the
    number of squarings.
    """
    n = jump.shape[0]
    q = rate * t * (jump - np.eye(n))
    norm = float(np.max(np.sum(np.abs(q), axis=1)))
    k = max(0, math.ceil(math.log2(norm / 0.5))) if norm > 0.5 else 0
    a_mat = q / (1 << k)
    a = norm / (1 << k)
    tol = TAYLOR_TOL / (1 << k)
    total = np.eye(n)
    term = np.eye(n)
    m = 0
    bound = math.inf
    while bound > tol:
        m += 1
        term = term @ a_mat / m
        total = total + term
        bound = a ** (m + 1) / math.factorial(m + 1) / (1 - a / (m + 2))
    for _ in range(k):
        total = total @ total
    total[(total < 0) & (total > -1e-12)] = 0.0
    return total


def exact_semigroup(chain: JumpChainSpec, t: float) -> FiniteKernel:
    """n-point transition kernel ``P_t`` of the jump chain."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return FiniteKernel.identity(chain.joint.n_states)
    return FiniteKernel(expm_generator(chain.joint.matrix, chain.rate, t))


def build_coalescing_chain(chain: JumpChainSpec) -> JumpChainSpec:
    """Coalescing version of an n-point jump chain.

    Rows of tuples with pairwise distinct coordinates are kept.  A tuple with
    repeated coordinates jumps by the law of its distinct coordinates (the
    marginal of its joint row) and its equal coordinates move together.
    """
    if chain.n < 2:
        raise ValueError("n must be at least 2")
    s_, n = chain.n_states, chain.n
    shape = (s_,) * n
    joint = chain.joint.matrix
    tuples = chain.tuples()
    one = chain.one_jump.matrix
    for row, x in zip(joint, tuples):
        r = row.reshape(shape)
        for i in range(n):
            marg = r.sum(axis=tuple(a for a in range(n) if a != i))
            if np.max(np.abs(marg - one[x[i]])) > 1e-12:
                raise ValueError(f"inconsistent marginals at {tuple(x)}, coordinate {i}")
    out = joint.copy()
    for xi, x in enumerate(tuples):
        first: dict[int, int] = {}
        rep = [first.setdefault(int(v), i) for i, v in enumerate(x)]
        reps = sorted(set(rep))
        if len(reps) == n:
            continue
        r = joint[xi].reshape(shape)
        marg = r.sum(axis=tuple(a for a in range(n) if a not in reps))
        new = np.zeros(s_**n)
        for y in itertools.product(range(s_), repeat=len(reps)):
            full = [y[reps.index(rep[i])] for i in range(n)]
            new[np.ravel_multi_index(tuple(full), shape)] = marg[y]
        out[xi] = new
    return JumpChainSpec(chain.one_jump, n, FiniteKernel(out), chain.rate)


def diagonal_mask(chain: JumpChainSpec) -> np.ndarray:
    """Tuples with at least two equal coordinates."""
    t = chain.tuples()
    return np.array([len(set(map(int, x))) < chain.n for x in t])


# ---------------------------------------------------------------------------
# noise atoms


def noise_atom_check(p: float | None, eps: float, replicas: int, seed: int,
                     threads: int = 1) -> ExperimentReport:
    """Frequencies of the at-most-one-event atoms of ``F_{0,eps}``.

    ``p = None`` checks the map flow: one no-event atom ``e^-eps`` and one atom
    ``eps e^-eps / 4`` per map.  A number ``p`` checks the kernel flow: the
    uniform-kernel event ``(1-p) eps e^-eps`` and four ``p eps e^-eps / 4``
    map atoms.  The two-or-more-event remainder is reported on its own row.
    """
    if not 0 < eps <= 0.05:
        raise ValueError("eps must lie in (0, 0.05]")
    label = "map" if p is None else f"kernel_p{p:g}"
    spec = two_state_spec(p)
    law = spec.map_law

    def job(g, size, _):
        b = sample_flow_batch(spec, eps, size, g)
        cols = [b.counts == 0]
        if p is not None:
            cols.append((b.counts == 1) & (b.first_mark == 0))
        for m in range(law.n_maps):
            one = (b.counts == 1) & (b.first_map == m)
            if p is not None:
                one &= b.first_mark == 1
            cols.append(one)
        cols.append(b.counts >= 2)
        cols.append(np.all(b.maps == np.arange(2), axis=1))
        return np.stack(cols, axis=1).astype(float)

    data = np.concatenate(rngmod.run_chunks(job, replicas, seed, ("atoms", label), threads))
    e = math.exp(-eps)
    names = ["no_event"]
    oracle = [e]
    if p is not None:
        names.append("uniform_kernel_event")
        oracle.append((1 - p) * eps * e)
    w = 1.0 if p is None else p
    for nm in law.names:
        names.append(f"single_{nm}")
        oracle.append(w * eps * e / 4)
    names.append("two_or_more_events")
    oracle.append(1 - e * (1 + eps))
    # identity after k uniform draws: only I/sigma words with an even number of sigmas
    names.append("map_is_identity")
    oracle.append(e * (1 + 0.5 * (math.exp(eps / 2) - 1)))
    rep = ExperimentReport(f"atoms_{label}")
    for j, (nm, o) in enumerate(zip(names, oracle)):
        if p is not None and nm == "map_is_identity":
            continue
        mean, se = mc_mean_ci(data[:, j])
        rep.add_z(f"P[{nm}] eps={eps:g}", mean, se, o)
    return rep


# ---------------------------------------------------------------------------
# coupling from the past


class CftpError(RuntimeError):
    """Raised when backward composition fails to coalesce within the cap."""


@dataclass(frozen=True)
class CftpResult:
    value: int
    tau: int
    horizon: int


def cftp_sample(law: RandomMapLaw, rng: np.random.Generator, cap: int = 1 << 30,
                check: bool = True) -> CftpResult:
    """One exact draw from the stationary law of the chain driven by ``law``.

    Steps ``-1, -2, ...`` carry i.i.d. maps.  The look-back horizon doubles
    and maps drawn for already visited steps are reused.  ``tau`` is the first
    ``k`` for which ``phi_{-1} o ... o phi_{-k}`` is constant.  With ``check``
    the composition is extended to twice the final horizon with fresh steps
    and must return the same value.
    """
    s_ = law.n_states
    if s_ == 1:
        return CftpResult(0, 0, 0)
    maps = law.maps
    stored = np.empty(0, dtype=np.int64)
    g_map = np.arange(s_)
    done = 0
    horizon = 1
    tau = -1
    while True:
        if horizon > cap:
            raise CftpError(f"no coalescence within {cap} steps; "
                            f"{len(np.unique(g_map))} classes survive")
        stored = np.concatenate([stored, law.draw(rng, horizon - stored.size)])
        while done < horizon:
            g_map = g_map[maps[stored[done]]]
            done += 1
            if tau < 0 and g_map[0] == g_map[-1] and np.all(g_map == g_map[0]):
                tau = done
        if tau >= 0:
            break
        horizon *= 2
    value = int(g_map[0])
    if check:
        ext = np.concatenate([stored, law.draw(rng, horizon)])
        g2 = np.arange(s_)
        for k in range(ext.size):
            g2 = g2[maps[ext[k]]]
        if not np.all(g2 == value):
            raise CftpError("extending the look-back changed the sample")
    return CftpResult(value, tau, horizon)


def cftp_batch(law: RandomMapLaw, samples: int, seed: int, threads: int = 1,
               key: Sequence[int | str] = ("cftp",)) -> tuple[np.ndarray, np.ndarray]:
    """Many independent CFTP draws; returns ``(values, taus)``."""

    def job(g, size, _):
        vals = np.empty(size, dtype=np.int64)
        taus = np.empty(size, dtype=np.int64)
        for i in range(size):
            r = cftp_sample(law, g)
            vals[i], taus[i] = r.value, r.tau
        return vals, taus

    parts = rngmod.run_chunks(job, samples, seed, key, threads)
    return (np.concatenate([a for a, _ in parts]), np.concatenate([b for _, b in parts]))


def monotone_map_law(P: np.ndarray) -> RandomMapLaw:
    """Grand coupling ``x -> F_x^{-1}(U)`` of an ordered finite chain.

    The unit interval is cut at every cumulative row value; each piece gives
    one map, weighted by its length.
    """
    P = FiniteKernel(P).matrix
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    cuts = np.unique(np.concatenate([[0.0, 1.0], cum.ravel()]))
    cuts = cuts[(cuts >= 0) & (cuts <= 1)]
    maps, probs = [], []
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a <= 0:
            continue
        u = 0.5 * (a + b)
        phi = tuple(int(np.searchsorted(row, u, side="right")) for row in cum)
        if phi in maps:
            probs[maps.index(phi)] += b - a
        else:
            maps.append(phi)
            probs.append(b - a)
    return RandomMapLaw(maps, probs)


def stationary_law(P: np.ndarray) -> np.ndarray:
    """Solve ``pi P = pi`` with ``sum(pi) = 1``."""
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    a = np.vstack([P.T - np.eye(n), np.ones(n)])
    b = np.r_[np.zeros(n), 1.0]
    pi, *_ = np.linalg.lstsq(a, b, rcond=None)
    return pi


# ---------------------------------------------------------------------------
# chain spec files


@dataclass
class ChainFile:
    states: list[str]
    law: RandomMapLaw
    rate: float = 1.0
    p: float | None = None
    extra: dict = field(default_factory=dict)

    def echo(self) -> str:
        lines = [f"states = {' '.join(self.states)}"]
        for phi in self.law.maps:
            lines.append("map = " + " ".join(self.states[i] for i in phi))
        lines.append("probs = " + " ".join(repr(float(x)) for x in self.law.probs))
        lines.append(f"rate = {self.rate!r}")
        if self.p is not None:
            lines.append(f"p = {self.p!r}")
        return "\n".join(lines) + "\n"


def parse_chain_spec(text: str) -> ChainFile:
    """Read ``key = value`` lines: states, map (repeatable), probs, rate, p.

    Each ``map`` line lists the images of the states in order.
    """
    states: list[str] | None = None
    maps: list[list[str]] = []
    probs = None
    rate, p = 1.0, None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value'")
        key, val = (x.strip() for x in line.split("=", 1))
        if key == "states":
            states = val.split()
        elif key == "map":
            maps.append(val.split())
        elif key == "probs":
            probs = [float(x) for x in val.split()]
        elif key == "rate":
            rate = float(val)
        elif key == "p":
            p = float(val)
        else:
            raise ValueError(f"line {n}: unknown key {key!r}")
    if not states or len(set(states)) != len(states):
        raise ValueError("states must be a nonempty list of distinct labels")
    if not maps:
        raise ValueError("at least one map line is required")
    if probs is None:
        probs = [1.0 / len(maps)] * len(maps)
    pos = {s: i for i, s in enumerate(states)}
    table = []
    for m in maps:
        if len(m) != len(states):
            raise ValueError("each map must list one image per state")
        try:
            table.append([pos[v] for v in m])
        except KeyError as exc:
            raise ValueError(f"map image {exc.args[0]!r} is not a state") from None
    if rate <= 0:
        raise ValueError("rate must be positive")
    if p is not None and not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    return ChainFile(states, RandomMapLaw(table, probs), rate, p)
