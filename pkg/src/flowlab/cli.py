"""Command-line front end: ``flowlab <experiment> [options]``.

Configuration precedence is flags, then ``--config`` file, then built-in
defaults.  The resolved configuration is echoed on stdout and as a comment
header in every report.  Exit status: 0 all rows pass, 1 some row fails,
2 usage error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import ast
import json
import os
import sys
import time
from pathlib import Path

from . import experiments as ex
from .stats import ExperimentReport

EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_ERROR = 0, 1, 2, 3
OUT_ENV = "FLOWLAB_OUT"

#: keys that never enter the report (they cannot change any number)
NOT_ECHOED = ("threads", "out")


class UsageError(ValueError):
    pass


def parse_config_file(path: str) -> dict:
    """``key = value`` lines; values are Python literals or bare strings."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    cfg = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        try:
            cfg[key] = ast.literal_eval(val)
        except (ValueError, SyntaxError):
            cfg[key] = val
    return cfg


def alpha_grid(text: str) -> list[float]:
    """``a:b:step`` inclusive grid with the rejected point 2 removed."""
    try:
        a, b, s = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("expected start:stop:step") from None
    if s <= 0 or b < a:
        raise argparse.ArgumentTypeError("need start <= stop and step > 0")
    n = int(round((b - a) / s))
    vals = [round(a + i * s, 10) for i in range(n + 1)]
    return [v for v in vals if abs(v - 2.0) > 1e-9]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="64-bit master seed (default 42)")
    common.add_argument("--replicas", type=int, default=None, help="Monte Carlo replicas")
    common.add_argument("--level", type=int, default=None, help="dyadic grid level")
    common.add_argument("--out", default=None,
                        help=f"output directory (default ${OUT_ENV} or ./flowlab_out)")
    common.add_argument("--config", default=None, help="key = value configuration file")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default 1)")
    common.add_argument("--quick", action="store_true", help="small sizes for smoke runs")

    p = argparse.ArgumentParser(prog="flowlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("two-state", parents=[common], help="two-state map and kernel flows")
    s.add_argument("--p", type=float, help="kernel-flow mixture parameter")
    s.add_argument("--t", type=float, help="time of the two-point kernel table")

    s = sub.add_parser("atoms", parents=[common], help="small-time noise atoms")
    s.add_argument("--eps", type=float)
    s.add_argument("--p", type=float)

    s = sub.add_parser("cftp", parents=[common], help="coupling from the past")
    s.add_argument("--spec", help="chain file (states/map/probs lines)")
    s.add_argument("--samples", type=int)

    s = sub.add_parser("arratia", parents=[common], help="coalescing Brownian flow")
    s.add_argument("--gap", type=float, help="initial distance of the pair")
    s.add_argument("--horizon", type=float)
    s.add_argument("--step", type=float)
    s.add_argument("--no-bridge", dest="bridge", action="store_false", default=None)
    s.add_argument("--atoms", type=int, help="number of starts in the atom run")
    s.add_argument("--starts", type=float, nargs="+", dest="traj_starts",
                   help="starts of the plotted trajectory")

    s = sub.add_parser("tanaka", parents=[common], help="Tanaka flows")
    s.add_argument("--t", type=float)
    s.add_argument("--x", type=float, dest="x_law", help="start of the one-point law checks")
    s.add_argument("--starts", type=float, nargs="+", dest="traj_starts")

    s = sub.add_parser("velocity", parents=[common], help="velocity-field extraction")
    s.add_argument("--t", type=float)
    s.add_argument("--x", type=float)

    s = sub.add_parser("kv", parents=[common], help="chaos expansion truncation gaps")
    s.add_argument("--t", type=float)
    s.add_argument("--x", type=float)
    s.add_argument("--N", type=int, help="highest chaos order (<= 6)")

    s = sub.add_parser("phase", parents=[common], help="boundary phase diagram")
    s.add_argument("--alpha-grid", type=alpha_grid, dest="alphas", help="start:stop:step")
    s.add_argument("--alpha", type=float, nargs="+", dest="alpha_list")
    s.add_argument("--profile", help="sigma2 table CSV (r,value) with '# exponent: a'")
    s.add_argument("--drift", help="drift table CSV in the same format")
    s.add_argument("--mc", dest="mc", action="store_true", default=None)
    s.add_argument("--no-mc", dest="mc", action="store_false")

    sub.add_parser("properties", parents=[common], help="structural property suite")
    sub.add_parser("all", parents=[common], help="every acceptance experiment")
    return p


GLOBAL = ("seed", "replicas", "level", "out", "config", "threads", "quick", "command")


def resolve_config(name: str, args: argparse.Namespace, file_cfg: dict) -> dict:
    flags = {k: v for k, v in vars(args).items() if k not in GLOBAL and v is not None}
    if flags.get("alpha_list") is not None:
        flags["alphas"] = flags.pop("alpha_list")
    for k in ("replicas", "level"):
        v = getattr(args, k)
        if v is not None:
            flags[k] = v
    if name == "cftp" and "replicas" in flags:
        flags.setdefault("samples", flags.pop("replicas"))
    merged = {k: v for k, v in file_cfg.items() if k not in ("seed", "threads", "quick", "out")}
    merged.update(flags)
    known = set(ex.DEFAULTS[name]) | {"level", "replicas"}
    unknown = sorted(set(merged) - known)
    if unknown and args.command != "all":
        raise UsageError(f"unknown option(s) for {name}: {', '.join(unknown)}")
    merged = {k: v for k, v in merged.items() if k in known}
    seed = args.seed if args.seed is not None else int(file_cfg.get("seed", 42))
    threads = args.threads if args.threads is not None else int(file_cfg.get("threads", 1))
    quick = args.quick or bool(file_cfg.get("quick", False))
    if threads < 1:
        raise UsageError("--threads must be at least 1")
    return ex.resolve(name, merged, quick, seed, threads)


def _write(out: Path, name: str, outcome: ex.Outcome) -> None:
    d = out / name
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.csv").write_text(outcome.report.to_csv(), encoding="utf-8")
    (d / "report.json").write_text(outcome.report.to_json(), encoding="utf-8")
    for fn, text in outcome.files.items():
        (d / fn).write_text(text, encoding="utf-8")


def _echo(name: str, cfg: dict) -> None:
    print(f"# experiment = {name}")
    for k in sorted(cfg):
        print(f"# {k} = {cfg[k]}")


def run_one(name: str, cfg: dict, out: Path) -> tuple[int, float, ExperimentReport]:
    """Run, write files, and return ``(status, seconds, report)``."""
    report_cfg = {k: v for k, v in cfg.items() if k not in NOT_ECHOED}
    t0 = time.perf_counter()
    try:
        outcome = ex.run(name, cfg)
        extra = {k: v for k, v in outcome.report.config.items() if k not in cfg}
        outcome.report.config = {**report_cfg, **extra}
        status = EXIT_PASS if outcome.report.passed else EXIT_FAIL
    except Exception as exc:  # diagnostic row, then runtime-error exit
        rep = ExperimentReport(name, config=dict(report_cfg))
        rep.add_error("runtime error", f"{type(exc).__name__}: {exc}")
        outcome = ex.Outcome(rep)
        status = EXIT_ERROR
    dt = time.perf_counter() - t0
    _write(out, name, outcome)
    return status, dt, outcome.report


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS
    out = Path(args.out or os.environ.get(OUT_ENV) or "flowlab_out")
    try:
        file_cfg = parse_config_file(args.config) if args.config else {}
        names = ex.ORDER if args.command == "all" else [args.command]
        cfgs = {n: resolve_config(n, args, file_cfg) for n in names}
    except (UsageError, ValueError) as exc:
        print(f"flowlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out.mkdir(parents=True, exist_ok=True)
    timings, worst = {}, EXIT_PASS
    summary = ["experiment,criteria,rows,failed,status"]
    for n in names:
        _echo(n, cfgs[n])
        status, dt, rep = run_one(n, cfgs[n], out)
        timings[n] = round(dt, 3)
        failed = sum(r.verdict != "pass" for r in rep.rows)
        crit = "+".join(str(c) for c in ex.CRITERIA[n])
        verdict = {EXIT_PASS: "PASS", EXIT_FAIL: "FAIL", EXIT_ERROR: "ERROR"}[status]
        print(rep.summary())
        print(f"== {n} (criteria {crit}): {verdict}, {len(rep.rows) - failed}/{len(rep.rows)} "
              f"rows pass, {dt:.1f} s")
        summary.append(f"{n},{crit},{len(rep.rows)},{failed},{verdict}")
        worst = max(worst, status)
    if args.command == "all":
        (out / "summary.csv").write_text("\n".join(summary) + "\n", encoding="utf-8")
    (out / "timings.json").write_text(json.dumps(timings, indent=1) + "\n", encoding="utf-8")
    return worst


if __name__ == "__main__":
    raise SystemExit(main())
