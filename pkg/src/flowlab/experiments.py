"""Acceptance experiments shared by the command line and the test suite.

Each experiment takes a resolved configuration dict and returns an
:class:`Outcome`: a verdict report plus plain-CSV plot data.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats as sps

from . import boundary, coalescing, core, finite, velocity
from . import rng as rngmod
from .stats import (ExperimentReport, anderson_normal, censored_ks, chi_square, ks_2samp,
                    ks_test, mc_mean_ci)


@dataclass
class Outcome:
    report: ExperimentReport
    files: dict = field(default_factory=dict)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# two-state example


def _two_point_table_rows(rep, name, kernels, chain_p, t):
    """Entrywise comparison of ``E[K(x1,y1) K(x2,y2)]`` with the exact table."""
    exact = finite.exact_semigroup(finite.two_state_chain(2, chain_p), t).matrix
    prod = np.einsum("rac,rbd->rabcd", kernels, kernels).reshape(kernels.shape[0], 4, 4)
    rows = []
    for i in range(4):
        for j in range(4):
            m, se = mc_mean_ci(prod[:, i, j])
            x, y = divmod(i, 2), divmod(j, 2)
            rep.add_z(f"{name} P2[{x}->{y}]", m, se, exact[i, j])
            rows.append((name, f"{x[0]}{x[1]}", f"{y[0]}{y[1]}", m, se, exact[i, j]))
    return rows


def two_state(cfg: dict) -> Outcome:
    """One-point law, two-point survival, kernel-flow and filtered tables."""
    seed, threads, n = cfg["seed"], cfg["threads"], cfg["replicas"]
    rep = ExperimentReport("two-state")
    spec = finite.two_state_spec()

    def batch(t, key, p=None):
        sp = spec if p is None else finite.two_state_spec(p)
        parts = rngmod.run_chunks(lambda g, size, _: sample(sp, t, size, g), n, seed, key, threads)
        return parts

    def sample(sp, t, size, g):
        return finite.sample_flow_batch(sp, t, size, g)

    t1 = math.log(2)
    maps = np.concatenate([b.maps for b in batch(t1, ("two-state", "one-point"))])
    m, se = mc_mean_ci(maps[:, 0] == 0)
    rep.add_z("P[phi_{0,ln2}(0)=0]", m, se, 0.75)
    m, se = mc_mean_ci(maps[:, 0] == 1)
    rep.add_z("P[phi_{0,ln2}(0)=1]", m, se, 0.25)
    for t in cfg["survival_times"]:
        maps = np.concatenate([b.maps for b in batch(t, ("two-state", "survival", t))])
        m, se = mc_mean_ci(maps[:, 0] != maps[:, 1])
        rep.add_z(f"P[phi_{{0,{t:g}}}(0)!=phi(1)]", m, se, math.exp(-t / 2))
    table = []
    p, t = cfg["p"], cfg["t"]
    parts = batch(t, ("two-state", "kernel", p, t), p)
    table += _two_point_table_rows(rep, f"kernel_p{p:g}_t{t:g}",
                                   np.concatenate([b.kernels for b in parts]), p, t)
    for pf in cfg["filter_ps"]:
        parts = batch(cfg["filter_t"], ("two-state", "filter", pf), pf)
        table += _two_point_table_rows(rep, f"filtered_p{pf:g}_t{cfg['filter_t']:g}",
                                       np.concatenate([b.filtered for b in parts]), pf,
                                       cfg["filter_t"])
    files = {"two_point_tables.csv": _csv(
        ("table", "from", "to", "estimate", "stderr", "exact"), table)}
    return Outcome(rep, files)


def atoms(cfg: dict) -> Outcome:
    rep = ExperimentReport("atoms")
    rep.extend(finite.noise_atom_check(None, cfg["eps"], cfg["replicas"], cfg["seed"], cfg["threads"]))
    rep.extend(finite.noise_atom_check(cfg["p"], cfg["eps"], cfg["replicas"], cfg["seed"],
                                       cfg["threads"]))
    return Outcome(rep)


def cftp(cfg: dict) -> Outcome:
    """Exact stationary samples compared with the balance-equation law."""
    rep = ExperimentReport("cftp")
    chains = []
    if cfg.get("spec"):
        with open(cfg["spec"], encoding="utf-8") as fh:
            cf = finite.parse_chain_spec(fh.read())
        rep.config["parsed_spec"] = cf.echo().strip().replace("\n", "; ")
        chains.append(("spec", cf.law))
    else:
        chains.append(("two_state", finite.two_state_law()))
        chains.append(("monotone", finite.monotone_map_law(np.array(cfg["matrix"]))))
    rows = []
    for name, law in chains:
        pi = finite.stationary_law(law.mean_kernel().matrix)
        vals, taus = finite.cftp_batch(law, cfg["samples"], cfg["seed"], cfg["threads"],
                                       ("cftp", name))
        rep.add_check(f"{name} re-extension determinism ({vals.size} samples)", True, vals.size)
        counts = np.bincount(vals, minlength=law.n_states)
        stat, pv = chi_square(counts, pi)
        rep.add_pvalue(f"{name} chi2 vs stationary law", pv)
        for s_, (c, q) in enumerate(zip(counts, pi)):
            rows.append((name, s_, int(c), q * vals.size))
        rep.config[f"{name}_max_tau"] = int(taus.max())
    return Outcome(rep, {"cftp_counts.csv": _csv(("chain", "state", "count", "expected"), rows)})


# ---------------------------------------------------------------------------
# coalescing flows


def arratia(cfg: dict) -> Outcome:
    rep = ExperimentReport("arratia")
    r, horizon, h = cfg["gap"], cfg["horizon"], cfg["step"]
    mt = coalescing.arratia_merge_times(r, horizon, h, cfg["replicas"], cfg["seed"],
                                        cfg["bridge"], cfg["threads"])
    d = censored_ks(mt, lambda t: coalescing.arratia_merge_cdf(r, t), horizon)
    rep.add_bound(f"merge-time KS r={r:g} on (0,{horizon:g}] h={h:g}", d, 0.01)
    mu0 = core.DiscreteMeasure.uniform_grid(cfg["atoms"])
    arows = coalescing.atom_statistics(mu0, "arratia", cfg["atom_times"], cfg["seed"],
                                       cfg["atom_step"])
    counts = [a.n_atoms for a in arows]
    rep.add_check("atom count strictly decreasing", all(b < a for a, b in zip(counts, counts[1:])),
                  counts[-1])
    rep.add_bound("max mass residual", max(a.residual for a in arows), 1e-12)
    # small trajectory dump for plotting
    spec = coalescing.ArratiaSpec(tuple(cfg["traj_starts"]), cfg["traj_horizon"], h, cfg["bridge"])
    times = list(np.linspace(0, cfg["traj_horizon"], 21))
    run = coalescing.arratia_simulate(spec, cfg["seed"], record=times)
    traj = [(0, t, int(c), p, int(s)) for t, ids, pos, sizes, _ in run.snapshots
            for c, p, s in zip(ids, pos, sizes)]
    merges = [(0, t, a, b) for t, a, b in run.merges]
    cdf_rows = [(t, float(np.mean(mt <= t)), float(coalescing.arratia_merge_cdf(r, t)))
                for t in np.linspace(0.05, horizon, 80)]
    return Outcome(rep, {
        "arratia_trajectory.csv": _csv(("replica", "time", "class_id", "position", "mass"), traj),
        "arratia_merges.csv": _csv(("replica", "time", "class_a", "class_b"), merges),
        "arratia_merge_cdf.csv": _csv(("time", "empirical", "exact"), cdf_rows),
        "arratia_atoms.csv": _csv(("time", "n_atoms", "max_mass", "residual"),
                                  [(a.time, a.n_atoms, a.max_mass, a.residual) for a in arows]),
    })


def tanaka(cfg: dict) -> Outcome:
    rep = ExperimentReport("tanaka")
    seed, threads, n, L, t = cfg["seed"], cfg["threads"], cfg["replicas"], cfg["level"], cfg["t"]
    x1 = cfg["x_law"]
    b = coalescing.tanaka_batch(x1, t, L, n, seed, threads, ("tanaka", "law"))
    d, pv = ks_test(b.X, lambda z: sps.norm.cdf(z, x1, math.sqrt(t)))
    rep.add_bound(f"one-point KS vs N({x1:g},{t:g})", d, 0.01)
    s = b.S(np.cos)
    m, se = mc_mean_ci(s)
    rep.add_z(f"E[S_t cos({x1:g})] vs heat", m, se, coalescing.heat_value(np.cos, x1, t))
    x2 = cfg["x_gap"]
    b2 = coalescing.tanaka_batch(x2, t, L, n, seed, threads, ("tanaka", "gap"))
    for name, f in (("cos", np.cos), ("sin", np.sin)):
        sf = b2.S(f)
        m2, se2 = mc_mean_ci(sf * sf)
        heat2 = coalescing.heat_value(lambda y, f=f: f(y) ** 2, x2, t)
        rep.add_gap(f"P_t {name}^2({x2:g}) - E[(S_t {name})^2]", heat2 - m2, se2)
    sf = b2.S(np.sin)
    fx = np.sin(b2.X)
    for k in range(4):
        dm, dse = mc_mean_ci((fx - sf) * b2.W**k)
        rep.add_z(f"E[(sin(X_t) - S_t sin) W_t^{k}] x={x2:g}", dm, dse, 0.0)
    run = coalescing.tanaka_coalescing(coalescing.TanakaSpec(tuple(cfg["traj_starts"]), t,
                                                             t / 1024), seed)
    traj = []
    for k in range(0, run.times.size, 16):
        for i in range(run.paths.shape[0]):
            traj.append((0, run.times[k], i, run.paths[i, k], 1))
    return Outcome(rep, {"tanaka_trajectory.csv": _csv(
        ("replica", "time", "class_id", "position", "mass"), traj)})


# ---------------------------------------------------------------------------
# velocity field and chaos


def velocity_exp(cfg: dict) -> Outcome:
    rep = ExperimentReport("velocity")
    seed, threads, n, L = cfg["seed"], cfg["threads"], cfg["replicas"], cfg["level"]
    f = velocity.circle_function("sin")
    x = cfg["x"]
    levels = sorted(set(cfg["cauchy_levels"]))
    top = cfg["cauchy_top"]

    def fn(b):
        W = {k: b.noise_sum(f, x, k) for k in levels + [top]}
        res14 = b.sde_residual_samples(f, x) ** 2
        res10 = b.coarsen(cfg["coarse_level"]).sde_residual_samples(f, x) ** 2
        cols = [(W[k] - W[top]) ** 2 for k in levels] + [W[top], res14, res10]
        return np.stack(cols)

    out = np.concatenate(velocity.circle_batches(cfg["t"], L, n, seed, fn, threads,
                                                 ("velocity", "main")), axis=1)
    nl = len(levels)
    defects = [mc_mean_ci(out[i]) for i in range(nl)]
    level_rows = [(k, top, dm, ds) for k, (dm, ds) in zip(levels, defects)]
    for i in range(nl - 1):
        diff = out[i] - out[i + 1]
        dm, ds = mc_mean_ci(diff)
        rep.add_gap(f"defect({levels[i]},{top}) - defect({levels[i+1]},{top})", dm, ds)
    wtop = out[nl]
    wm = wtop.mean()
    var_m, var_se = mc_mean_ci((wtop - wm) ** 2 * wtop.size / (wtop.size - 1))
    c_ff = float(velocity.circle_covariance(f, f, x, x))
    rep.add_z(f"Var W^{top} sin({x:g}) vs t C(f,f)", var_m, var_se, cfg["t"] * c_ff)
    a2, pv = anderson_normal(wtop)
    rep.add_pvalue(f"Anderson-Darling W^{top} normality", pv)
    r14, r14se = mc_mean_ci(out[nl + 1])
    r10, r10se = mc_mean_ci(out[nl + 2])
    rep.add_bound(f"SDE residual level {L}", r14, 5e-3, r14se)
    rep.add_gap(f"SDE residual level {cfg['coarse_level']} - level {L}", r10 - r14,
                math.sqrt(r10se**2 + r14se**2))

    tw = cfg["truth_t"]

    def fn2(b):
        return b.noise_sum(f, x, cfg["truth_level"]) - b.ground_truth(f, x)

    err = np.concatenate(velocity.circle_batches(tw, L, n, seed, fn2, threads, ("velocity", "truth")))
    dist = math.sqrt(float(np.mean(err**2)))
    rep.add_bound(f"L2 distance W^{cfg['truth_level']} to driver projection t={tw:g}", dist, 0.01)

    bump = velocity.bump_function(0.0, 1.0)
    ad, ase = velocity.arratia_cauchy_defect(bump, cfg["arratia_x"], 1.0, cfg["arratia_level"],
                                             4, 8, cfg["arratia_replicas"], seed, threads)
    rep.add_gap("Arratia defect(4,8) non-Cauchy", ad, ase, 10.0)
    level_rows.append(("arratia4", "arratia8", ad, ase))
    return Outcome(rep, {"velocity_levels.csv": _csv(("level_n", "level_m", "defect", "stderr"),
                                                     level_rows)})


def kv(cfg: dict) -> Outcome:
    rep = ExperimentReport("kv")
    r = velocity.kv_truncate(cfg["x"], cfg["t"], "sin", 1, cfg["N"], cfg["level"],
                             cfg["replicas"], cfg["seed"], cfg["threads"])
    closed = velocity.kv_gap0_closed_form("sin", 1, cfg["x"], cfg["t"])
    rep.add_z("gap(0) vs closed form", r.gaps[0], r.stderr[0], closed)
    for k in range(cfg["N"]):
        dm, ds = mc_mean_ci(r.samples[k] - r.samples[k + 1])
        rep.add_gap(f"gap({k}) - gap({k+1})", dm, ds)
    rows = [(k, g, s) for k, (g, s) in enumerate(zip(r.gaps, r.stderr))]
    return Outcome(rep, {"kv_gaps.csv": _csv(("N", "gap", "stderr"), rows)})


# ---------------------------------------------------------------------------
# boundary phases


def expected_phase(alpha: float) -> str:
    if alpha < 1:
        return "regular"
    if alpha < 2:
        return "exit"
    return "natural"


def phase(cfg: dict) -> Outcome:
    rep = ExperimentReport("phase")
    alphas = cfg["alphas"]
    user = []
    if cfg.get("profile"):
        with open(cfg["profile"], encoding="utf-8") as fh:
            sig = fh.read()
        mu = None
        if cfg.get("drift"):
            with open(cfg["drift"], encoding="utf-8") as fh:
                mu = fh.read()
        user.append(("user", boundary.table_profile(sig, mu, "user")))
    rows = boundary.phase_scan(alphas, user, cfg["threads"])
    for a, row in zip(alphas, rows):
        if row.error:
            rep.add_error(f"alpha={a:g}", row.error)
            continue
        want = expected_phase(a)
        rep.add_check(f"alpha={a:g} class {row.boundary} (expected {want})", row.boundary == want, a)
        if cfg["invariance"]:
            p = boundary.sobolev_d1_profile(a)
            variants = [p.scaled(0.1), p.scaled(10.0), p.with_cutoff(p.c / 2)]
            same = all(boundary.classify(v).boundary == row.boundary for v in variants)
            rep.add_check(f"alpha={a:g} scaling and cutoff invariance", same, a)
    for lab, _ in user:
        r = rows[-1]
        if r.error:
            rep.add_error(lab, r.error)
        else:
            rep.add_check(f"{lab} classified as {r.boundary}", True)
    if cfg["mc"]:
        g = rngmod.stream(cfg["seed"], "phase-mc")
        for a in cfg["mc_alphas"]:
            frac = boundary.euler_hit_fraction(a, 0.5, 1e-4, 10.0, cfg["mc_dt"], cfg["mc_runs"], g)
            se = math.sqrt(max(frac * (1 - frac), 1e-12) / cfg["mc_runs"])
            accessible = expected_phase(a) in ("regular", "exit")
            if accessible:
                rep.add_bound(f"alpha={a:g} hit fraction (accessible)", frac, 0.99, se, upper=False)
                rep.add_z(f"alpha={a:g} hit fraction vs exact hitting law",
                          frac, se, boundary.bessel_hit_probability(a, 0.5, 10.0))
            else:
                rep.add_bound(f"alpha={a:g} hit fraction (inaccessible)", frac, 0.01, se)
    return Outcome(rep, {"phase.csv": boundary.phase_csv(rows)})


# ---------------------------------------------------------------------------
# property suite


def properties(cfg: dict) -> Outcome:
    from . import properties as props

    return Outcome(props.property_suite(cfg["seed"], cfg["replicas"], cfg["threads"]))


# ---------------------------------------------------------------------------
# registry

LN2 = math.log(2)

DEFAULTS: dict[str, dict] = {
    "two-state": dict(replicas=100_000, p=0.5, t=1.0, survival_times=[0.5, 1.0, 2.0],
                      filter_ps=[0.3, 0.7], filter_t=1.0),
    "atoms": dict(replicas=1_000_000, eps=0.01, p=0.3),
    "cftp": dict(samples=100_000, spec=None, matrix=[[0.9, 0.1], [0.2, 0.8]]),
    "arratia": dict(replicas=100_000, gap=1.0, horizon=4.0, step=1e-3, bridge=True, atoms=1000,
                    atom_times=[0.0, 1e-4, 1e-3, 1e-2, 0.1], atom_step=1e-5,
                    traj_starts=[-1.0, -0.5, 0.0, 0.25, 0.5, 1.0], traj_horizon=1.0),
    "tanaka": dict(replicas=100_000, level=13, t=1.0, x_law=1.0, x_gap=0.2,
                   traj_starts=[-1.0, -0.5, 0.0, 0.2, 0.5, 1.0]),
    "velocity": dict(replicas=10_000, level=14, t=1.0, x=0.0, cauchy_levels=[2, 4, 8],
                     cauchy_top=12, coarse_level=10, truth_t=0.5, truth_level=12,
                     arratia_x=0.5, arratia_level=10, arratia_replicas=4000),
    "kv": dict(replicas=4000, level=10, t=0.25, x=0.0, N=3),
    "phase": dict(alphas=[round(0.1 * i, 1) for i in range(1, 40) if i != 20], invariance=True,
                  mc=True, mc_alphas=[1.5, 2.5], mc_runs=10_000, mc_dt=1e-3,
                  profile=None, drift=None),
    "properties": dict(replicas=10_000),
}

QUICK: dict[str, dict] = {
    "two-state": dict(replicas=20_000),
    "atoms": dict(replicas=100_000),
    "cftp": dict(samples=10_000),
    "arratia": dict(replicas=4000, step=4e-3, atom_step=1e-4),
    "tanaka": dict(replicas=4000, level=9),
    "velocity": dict(replicas=500, level=10, cauchy_top=8, cauchy_levels=[2, 4, 6], coarse_level=8,
                     truth_level=8, arratia_replicas=500, arratia_level=9),
    "kv": dict(replicas=500, level=8),
    "phase": dict(alphas=[0.5, 1.0, 1.5, 2.5, 3.0], mc_runs=500, mc_dt=1e-2),
    "properties": dict(replicas=2000),
}

RUNNERS: dict[str, Callable[[dict], Outcome]] = {
    "two-state": two_state,
    "atoms": atoms,
    "cftp": cftp,
    "arratia": arratia,
    "tanaka": tanaka,
    "velocity": velocity_exp,
    "kv": kv,
    "phase": phase,
    "properties": properties,
}

ORDER = ["two-state", "atoms", "cftp", "arratia", "tanaka", "velocity", "kv", "phase", "properties"]

#: acceptance criterion number per experiment
CRITERIA = {"two-state": (1, 3), "atoms": (2,), "cftp": (4,), "arratia": (5,), "tanaka": (6,),
            "velocity": (7,), "kv": (8,), "phase": (9,), "properties": (10,)}


def resolve(name: str, overrides: dict | None = None, quick: bool = False, seed: int = 42,
            threads: int = 1) -> dict:
    cfg = dict(DEFAULTS[name])
    if quick:
        cfg.update(QUICK.get(name, {}))
    cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
    cfg.setdefault("seed", seed)
    cfg.setdefault("threads", threads)
    return cfg


def run(name: str, cfg: dict) -> Outcome:
    out = RUNNERS[name](cfg)
    out.report.config.update({k: v for k, v in cfg.items()})
    return out
