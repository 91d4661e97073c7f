"""Acceptance criteria 1-10, run once at full size through ``flowlab all``.

Each criterion prints one ``AC n: PASS/FAIL`` line (also collected into the
terminal summary) and asserts its rows and its runtime limit.  Criteria 6 and
9 contain one row each whose stated threshold contradicts the exact law; the
analysis is in the README and these rows are left red on purpose.
"""

from __future__ import annotations

import json

import pytest

from flowlab import cli

pytestmark = pytest.mark.slow


def _ac1(r):
    return not r["statistic"].startswith("filtered_")


def _ac3(r):
    return r["statistic"].startswith("filtered_")


def _every(r):
    return True


# criterion -> (experiment, row selector, runtime limit in seconds, description)
CRITERIA = {
    1: ("two-state", _ac1, 30, "two-state one-point law and two-point survival"),
    2: ("atoms", _every, 60, "noise atoms at eps = 0.01"),
    3: ("two-state", _ac3, 60, "filtered map flow equals the p-mixture table"),
    4: ("cftp", _every, 60, "CFTP chi2 and re-extension determinism"),
    5: ("arratia", _every, 300, "Arratia merge law, atoms, mass residual"),
    6: ("tanaka", _every, 300, "Tanaka one-point law, heat value, gap, joint moments"),
    7: ("velocity", _every, 600, "velocity-field extraction and Cauchy defects"),
    8: ("kv", _every, 300, "chaos truncation gaps"),
    9: ("phase", _every, 120, "boundary phase diagram and accessibility"),
    10: ("properties", _every, 1800, "property suite and `all` exit status"),
}

KNOWN_RED = {
    6: "the strict gap vanishes identically for even f such as cos",
    9: "the exact hitting probability at alpha = 1.5 is 0.889, below 0.99",
}


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    status = cli.main(["all", "--out", str(out)])
    timings = json.loads((out / "timings.json").read_text())
    reports = {
        name: json.loads((out / name / "report.json").read_text())["rows"] for name in timings
    }
    return status, timings, reports


@pytest.mark.parametrize("crit", sorted(CRITERIA))
def test_criterion(crit, full_run, acceptance_log):
    status, timings, reports = full_run
    exp, select, limit, what = CRITERIA[crit]
    rows = [r for r in reports[exp] if select(r)]
    bad = [f"{r['statistic']} -> {r['verdict']} (estimate {r['estimate']:.6g})"
           for r in rows if r["verdict"] != "pass"]
    passed = len(rows) - len(bad)
    seconds = sum(timings.values()) if crit == 10 else timings[exp]
    if seconds >= limit:
        bad.append(f"runtime {seconds:.1f} s exceeds {limit} s")
    if crit == 10 and status != cli.EXIT_PASS:
        bad.append(f"`all` exit status {status} (failing rows in other criteria)")
    verdict = "PASS" if not bad and rows else "FAIL"
    line = (f"AC {crit}: {verdict}  {what}; {passed}/{len(rows)} rows, "
            f"{seconds:.1f} s (limit {limit} s)")
    if bad:
        line += "; " + " | ".join(bad)
    if crit in KNOWN_RED and bad:
        line += f"  [{KNOWN_RED[crit]}]"
    print(line)
    acceptance_log.append(line)
    assert rows, f"no report rows for criterion {crit}"
    assert not bad, line
