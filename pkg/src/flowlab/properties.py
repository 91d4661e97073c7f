"""Structural properties checked on every flow family.

Cocycle exactness, stationarity (two-sample KS), independent increments
(correlation), partition coarsening, Chapman-Kolmogorov and row
stochasticity.  Each property contributes rows to one report.
"""

from __future__ import annotations

import math

import numpy as np

from . import coalescing, finite, velocity
from .core import FiniteKernel
from .stats import ExperimentReport, ks_2samp

#: window length of the stationarity and increment statistics
H = 0.5
#: offset of the second stationarity window
T_FAR = 7.5
ROW_TOL = 1e-12
CK_TOL = 1e-10


def _seeds(seed: int, key: int, n: int) -> list[int]:
    ss = np.random.SeedSequence(seed, spawn_key=(key,))
    return [int(v) for v in ss.generate_state(n, np.uint64)]


# ---------------------------------------------------------------------------
# finite families

FINITE = ("map", "kernel_p0.3", "filtered_p0.3")


def _finite_flow(family: str, window, seed, level):
    if family == "map":
        return finite.simulate_map_flow(finite.two_state_spec(), window, seed, level)
    spec = finite.two_state_spec(0.3)
    if family.startswith("kernel"):
        return finite.simulate_kernel_flow(spec, window, seed, level)
    return finite.filter_flow(finite.simulate_map_flow(spec, window, seed, level))


def _finite_stat(flow, i: int = 0) -> float:
    """Signed offset of the first event in cell ``i`` (window length if none), plus ``K(0,0)``."""
    s, t = flow.times[i], flow.times[i + 1]
    ev = flow.events[i]
    first = (ev[0].time - s) * (1 if ev[0].mark else -1) if ev else t - s
    inc = flow.increments[i]
    k00 = float(inc[0] == 0) if flow.kind == "map" else float(inc.matrix[0, 0])
    return first + 4.0 * k00


def _finite_cocycle(rep: ExperimentReport, family: str, seed: int, n_flows: int) -> None:
    worst = 0.0
    exact = True
    for s in _seeds(seed, 1, n_flows):
        fl = _finite_flow(family, (0.0, 4.0), s, 3)
        tot = fl.total()
        for u in range(1, fl.n_cells):
            a, b = fl.between(0, u), fl.between(u, fl.n_cells)
            if fl.kind == "map":
                exact &= bool(np.array_equal(b[a], tot))
            else:
                worst = max(worst, float(np.abs((a @ b).matrix - tot.matrix).max()))
    if family == "map":
        rep.add_check(f"{family} cocycle exact at every interior node ({n_flows} flows)", exact)
    else:
        rep.add_bound(f"{family} cocycle max deviation ({n_flows} flows)", worst, ROW_TOL)


def _finite_stationarity(rep, family, seed, n):
    a = [_finite_stat(_finite_flow(family, (0.0, H), s, 0)) for s in _seeds(seed, 2, n)]
    b = [_finite_stat(_finite_flow(family, (T_FAR, T_FAR + H), s, 0)) for s in _seeds(seed, 3, n)]
    _, p = ks_2samp(np.array(a), np.array(b))
    rep.add_pvalue(f"{family} stationarity KS [0,{H:g}] vs [{T_FAR:g},{T_FAR + H:g}]", p)


def _finite_increments(rep, family, seed, n):
    x, y = np.empty(n), np.empty(n)
    for r, s in enumerate(_seeds(seed, 4, n)):
        fl = _finite_flow(family, (0.0, 2 * H), s, 1)
        x[r], y[r] = _finite_stat(fl, 0), _finite_stat(fl, 1)
    _corr_row(rep, family, x, y)


def _corr_row(rep, family, x, y):
    c = float(np.corrcoef(x, y)[0, 1])
    rep.add_bound(f"{family} |corr| over disjoint windows", abs(c), 4 / math.sqrt(x.size))


def _finite_coarsening(rep, seed, n_flows):
    ok = True
    for s in _seeds(seed, 5, n_flows):
        fl = _finite_flow("map", (0.0, 4.0), s, 4)
        sizes = [np.unique(fl.between(0, k)).size for k in range(fl.n_cells + 1)]
        ok &= all(b <= a for a, b in zip(sizes, sizes[1:]))
    rep.add_check(f"map image partition coarsens ({n_flows} flows)", ok)


def _chapman_kolmogorov(rep, seed):
    g = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(6,)))
    for name, chain in (("map two-point", finite.two_state_chain(2, 1.0)),
                        ("kernel_p0.3 two-point", finite.two_state_chain(2, 0.3)),
                        ("one-point", finite.two_state_chain(1, 1.0))):
        worst = 0.0
        for _ in range(20):
            s, t = g.uniform(0, 5, 2)
            lhs = finite.exact_semigroup(chain, s + t).matrix
            rhs = finite.exact_semigroup(chain, s).matrix @ finite.exact_semigroup(chain, t).matrix
            worst = max(worst, float(np.abs(lhs - rhs).max()))
        rep.add_bound(f"{name} Chapman-Kolmogorov sup-norm (20 random s,t)", worst, CK_TOL)


def _row_stochastic(rep, seed, n_flows):
    for family in FINITE[1:]:
        worst = 0.0
        neg = False
        for s in _seeds(seed, 7, n_flows):
            fl = _finite_flow(family, (0.0, 4.0), s, 2)
            for k in range(fl.n_cells + 1):
                m = fl.between(0, k).matrix
                worst = max(worst, float(np.abs(m.sum(axis=1) - 1).max()))
                neg |= bool(np.any(m < 0))
        rep.add_bound(f"{family} realized kernels row-sum deviation", worst, ROW_TOL)
        rep.add_check(f"{family} realized kernels nonnegative", not neg)
    worst = 0.0
    for p in (0.3, 1.0):
        for t in (0.1, 1.0, 5.0):
            m = finite.exact_semigroup(finite.two_state_chain(2, p), t).matrix
            worst = max(worst, float(np.abs(m.sum(axis=1) - 1).max()))
            FiniteKernel(m)
    rep.add_bound("exact two-point semigroups row-sum deviation", worst, ROW_TOL)


# ---------------------------------------------------------------------------
# Arratia


def _arratia_cocycle(rep, seed, step, n_runs):
    starts = tuple(np.linspace(-1, 1, 21))
    T, u = 100, 37
    exact = True
    for s in _seeds(seed, 11, n_runs):
        full = coalescing.arratia_simulate(coalescing.ArratiaSpec(starts, T * step, step), s,
                                           record=[u * step])
        _, _, pos_u, _, _ = full.snapshots[0]
        rest = coalescing.arratia_simulate(
            coalescing.ArratiaSpec(tuple(pos_u), (T - u) * step, step), s, start_cell=u)
        exact &= bool(np.array_equal(np.sort(rest.final.positions),
                                     full.final.positions))
    rep.add_check(f"arratia cocycle exact on restart at an interior node ({n_runs} runs)", exact)


def _arratia_disp(seed, start_cell, cells, step, x=(0.0, 0.3)):
    run = coalescing.arratia_simulate(coalescing.ArratiaSpec(x, cells * step, step), seed,
                                      start_cell=start_cell)
    return float(run.final.particle_positions()[0] - x[0])


def _arratia_stationarity(rep, seed, n, step):
    cells = int(round(H / step))
    far = int(round(T_FAR / step))
    a = [_arratia_disp(s, 0, cells, step) for s in _seeds(seed, 12, n)]
    b = [_arratia_disp(s, far, cells, step) for s in _seeds(seed, 13, n)]
    _, p = ks_2samp(np.array(a), np.array(b))
    rep.add_pvalue(f"arratia stationarity KS [0,{H:g}] vs [{T_FAR:g},{T_FAR + H:g}]", p)


def _arratia_increments(rep, seed, n, step):
    cells = int(round(H / step))
    x, y = np.empty(n), np.empty(n)
    for r, s in enumerate(_seeds(seed, 14, n)):
        x[r] = _arratia_disp(s, 0, cells, step)
        y[r] = _arratia_disp(s, cells, cells, step)
    _corr_row(rep, "arratia", x, y)


def _arratia_coarsening(rep, seed, n_runs):
    ok = True
    for s in _seeds(seed, 15, n_runs):
        run = coalescing.arratia_simulate(
            coalescing.ArratiaSpec(tuple(np.linspace(0, 1, 50)), 0.05, 1e-4), s)
        c = [k for _, k in run.class_counts]
        ok &= all(b <= a for a, b in zip(c, c[1:]))
    rep.add_check(f"arratia class count non-increasing ({n_runs} runs)", ok)


# ---------------------------------------------------------------------------
# Tanaka


def _tanaka_run(starts, seed, start_cell, cells, step):
    return coalescing.tanaka_coalescing(coalescing.TanakaSpec(tuple(starts), cells * step, step),
                                        seed, start_cell)


def _tanaka_cocycle(rep, seed, step, n_runs):
    starts = np.linspace(-1, 1, 21)
    T, u = 400, 150
    worst = 0.0
    for s in _seeds(seed, 21, n_runs):
        full = _tanaka_run(starts, s, 0, T, step)
        rest = _tanaka_run(full.paths[:, u], s, u, T - u, step)
        worst = max(worst, float(np.abs(rest.paths[:, -1] - full.paths[:, -1]).max()))
    rep.add_bound(f"tanaka cocycle max deviation on restart ({n_runs} runs)", worst, ROW_TOL)


def _tanaka_flow_property(rep, seed, step, n_runs):
    starts = np.linspace(-1, 1, 21)
    sub = starts[::3]
    same = True
    joined = True
    for s in _seeds(seed, 22, n_runs):
        full = _tanaka_run(starts, s, 0, 400, step)
        part = _tanaka_run(sub, s, 0, 400, step)
        same &= bool(np.array_equal(part.paths, full.paths[::3]))
        for i, k in enumerate(full.tau):
            if k < full.times.size:
                joined &= bool(np.array_equal(full.paths[i, k:], full.origin[k:]))
    rep.add_check(f"tanaka subset of starts reproduces the n-point run ({n_runs} runs)", same)
    rep.add_check(f"tanaka paths follow the origin path after hitting ({n_runs} runs)", joined)


def _tanaka_stationarity(rep, seed, n, step):
    cells = int(round(H / step))
    far = int(round(T_FAR / step))
    a = [_tanaka_run([0.2], s, 0, cells, step).paths[0, -1] for s in _seeds(seed, 23, n)]
    b = [_tanaka_run([0.2], s, far, cells, step).paths[0, -1] for s in _seeds(seed, 24, n)]
    _, p = ks_2samp(np.array(a), np.array(b))
    rep.add_pvalue(f"tanaka stationarity KS [0,{H:g}] vs [{T_FAR:g},{T_FAR + H:g}]", p)


def _tanaka_increments(rep, seed, n, step):
    cells = int(round(H / step))
    x, y = np.empty(n), np.empty(n)
    for r, s in enumerate(_seeds(seed, 25, n)):
        x[r] = _tanaka_run([0.2], s, 0, cells, step).paths[0, -1]
        y[r] = _tanaka_run([0.2], s, cells, cells, step).paths[0, -1]
    _corr_row(rep, "tanaka", x, y)


def _tanaka_coarsening(rep, seed, step, n_runs):
    ok = True
    for s in _seeds(seed, 26, n_runs):
        run = _tanaka_run(np.linspace(-1, 1, 41), s, 0, 400, step)
        counts = [np.unique(run.paths[:, k]).size for k in range(run.times.size)]
        ok &= all(b <= a for a, b in zip(counts, counts[1:]))
    rep.add_check(f"tanaka distinct positions non-increasing ({n_runs} runs)", ok)


# ---------------------------------------------------------------------------
# circle SDE flow


def _circle(rep, seed, n, level):
    t = 2 * H
    g = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(31,)))
    b = velocity.CircleBatch.sample(t, level, n, g)
    half = 1 << (level - 1)
    full = b.path(0.3)
    rest = b.path(full[:, half], half)
    rep.add_check("circle cocycle exact on restart at the midpoint", bool(
        np.array_equal(rest[:, -1], full[:, -1])))
    x = b.path(0.3, 0, half)[:, -1]
    y = b.path(0.3, half)[:, -1]
    _corr_row(rep, "circle", x, y)
    g2 = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(32,)))
    # same step in both windows: [0, T_FAR + H] is 16 windows long
    far = velocity.CircleBatch.sample(T_FAR + H, level + 4, n // 4, g2)
    k0 = int(round(T_FAR / far.step))
    late = far.path(0.3, k0)[:, -1]
    early = velocity.CircleBatch.sample(H, level, n, g2).path(0.3)[:, -1]
    _, p = ks_2samp(early, late)
    rep.add_pvalue(f"circle stationarity KS [0,{H:g}] vs [{T_FAR:g},{T_FAR + H:g}]", p)
    starts = np.linspace(-3, 3, 13)
    ends = np.array([b.path(x0)[:8, -1] for x0 in starts])
    rep.add_check("circle flow keeps distinct starts distinct (no coalescence)",
                  bool(np.all(np.diff(ends, axis=0) > 0)))


def property_suite(seed: int, replicas: int = 10_000, threads: int = 1) -> ExperimentReport:
    """Run every property on every flow family; ``replicas`` sizes the statistical rows."""
    rep = ExperimentReport("properties")
    n = replicas
    n_flows = max(20, replicas // 100)
    for fam in FINITE:
        _finite_cocycle(rep, fam, seed, n_flows)
        _finite_stationarity(rep, fam, seed, n)
        _finite_increments(rep, fam, seed, n)
    _finite_coarsening(rep, seed, n_flows)
    _chapman_kolmogorov(rep, seed)
    _row_stochastic(rep, seed, n_flows)
    step = 0.05
    _arratia_cocycle(rep, seed, 1e-3, n_flows)
    _arratia_stationarity(rep, seed, n, step)
    _arratia_increments(rep, seed, n, step)
    _arratia_coarsening(rep, seed, max(5, n_flows // 10))
    _tanaka_cocycle(rep, seed, 1e-3, n_flows)
    _tanaka_flow_property(rep, seed, 1e-3, n_flows)
    _tanaka_stationarity(rep, seed, n, step)
    _tanaka_increments(rep, seed, n, step)
    _tanaka_coarsening(rep, seed, 1e-3, n_flows)
    _circle(rep, seed, n, 8)
    return rep
