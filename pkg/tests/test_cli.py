from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from flowlab import cli


def run(tmp_path: Path, *args: str, out: str = "out") -> tuple[int, Path]:
    d = tmp_path / out
    code = cli.main([*args, "--out", str(d)])
    return code, d


def read(p: Path) -> str:
    return p.read_text(encoding="utf-8")


@pytest.mark.parametrize("argv", [
    ["nonsense"],
    ["phase", "--alpha-grid", "1:0:0.1"],
    ["two-state", "--p", "notanumber"],
    [],
])
def test_usage_errors_exit_2(argv, capsys):
    assert cli.main(argv) == cli.EXIT_USAGE


def test_unknown_config_key_is_usage_error(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("bogus = 3\n")
    code, _ = run(tmp_path, "two-state", "--config", str(cfg))
    assert code == cli.EXIT_USAGE


def test_missing_config_file_is_usage_error(tmp_path):
    code, _ = run(tmp_path, "two-state", "--config", str(tmp_path / "nope.txt"))
    assert code == cli.EXIT_USAGE


def test_report_files_and_echoed_config(tmp_path, capsys):
    code, d = run(tmp_path, "two-state", "--p", "0.5", "--t", "1", "--replicas", "20000",
                  "--seed", "42")
    assert code in (cli.EXIT_PASS, cli.EXIT_FAIL)
    text = read(d / "two-state" / "report.csv")
    assert "# p = 0.5\n" in text and "# seed = 42\n" in text and "# replicas = 20000\n" in text
    rows = list(csv.reader(line for line in text.splitlines() if not line.startswith("#")))
    assert rows[0] == ["experiment", "statistic", "estimate", "stderr", "oracle", "z_score", "verdict"]
    assert any("kernel_p0.5_t1 P2[" in r[1] for r in rows[1:])
    payload = json.loads(read(d / "two-state" / "report.json"))
    assert payload["config"]["p"] == 0.5
    assert (d / "two-state" / "two_point_tables.csv").exists()
    assert "two-state" in json.loads(read(d / "timings.json"))
    assert "# p = 0.5" in capsys.readouterr().out


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# comment\np = 0.7\nreplicas = 3000\nseed = 5\n")
    _, d = run(tmp_path, "two-state", "--config", str(cfg), "--p", "0.3")
    text = read(d / "two-state" / "report.csv")
    assert "# p = 0.3\n" in text and "# replicas = 3000\n" in text and "# seed = 5\n" in text


def test_env_var_sets_output_directory(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "envout"))
    assert cli.main(["atoms", "--quick"]) in (0, 1)
    assert (tmp_path / "envout" / "atoms" / "report.csv").exists()


def test_same_seed_gives_identical_files(tmp_path):
    args = ["cftp", "--samples", "3000", "--seed", "9"]
    run(tmp_path, *args, out="a")
    run(tmp_path, *args, "--threads", "3", out="b")
    for name in ("report.csv", "report.json", "cftp_counts.csv"):
        assert read(tmp_path / "a" / "cftp" / name) == read(tmp_path / "b" / "cftp" / name)
    run(tmp_path, "cftp", "--samples", "3000", "--seed", "10", out="c")
    assert read(tmp_path / "a" / "cftp" / "report.csv") != read(tmp_path / "c" / "cftp" / "report.csv")


def test_arratia_determinism_and_plot_files(tmp_path):
    args = ["arratia", "--quick", "--seed", "3"]
    run(tmp_path, *args, out="a")
    run(tmp_path, *args, "--threads", "2", out="b")
    for name in ("report.csv", "arratia_trajectory.csv", "arratia_merges.csv", "arratia_atoms.csv"):
        assert read(tmp_path / "a" / "arratia" / name) == read(tmp_path / "b" / "arratia" / name)
    head = read(tmp_path / "a" / "arratia" / "arratia_trajectory.csv").splitlines()[0]
    assert head == "replica,time,class_id,position,mass"


def test_cftp_spec_file(tmp_path):
    spec = tmp_path / "chain.txt"
    spec.write_text("states = 0 1\nmap = 0 0\nmap = 0 1\nmap = 1 1\nprobs = 0.2 0.7 0.1\n")
    code, d = run(tmp_path, "cftp", "--spec", str(spec), "--samples", "20000")
    assert code == cli.EXIT_PASS
    text = read(d / "cftp" / "report.csv")
    assert "spec chi2 vs stationary law" in text
    assert "# parsed_spec = states = 0 1;" in text


def test_bad_chain_file_gives_runtime_error_row(tmp_path):
    spec = tmp_path / "chain.txt"
    spec.write_text("states = 0 1\nmap = 0 7\n")
    code, d = run(tmp_path, "cftp", "--spec", str(spec), "--samples", "100")
    assert code == cli.EXIT_ERROR
    text = read(d / "cftp" / "report.csv")
    assert "runtime error: ValueError" in text and "inconclusive" in text


def test_phase_grid_table(tmp_path):
    code, d = run(tmp_path, "phase", "--alpha-grid", "0.1:3.9:0.1", "--no-mc")
    assert code == cli.EXIT_PASS
    rows = list(csv.DictReader(read(d / "phase" / "phase.csv").splitlines()))
    assert len(rows) == 38
    classes = [r["class"] for r in rows]
    assert classes == ["regular"] * 9 + ["exit"] * 10 + ["natural"] * 19


def test_phase_user_profile(tmp_path):
    table = tmp_path / "sigma.csv"
    table.write_text("# exponent: 0.5\nr,value\n"
                     + "".join(f"{r},{r ** 0.5!r}\n" for r in (0.001, 0.01, 0.1, 0.5, 1.0)))
    code, d = run(tmp_path, "phase", "--alpha", "0.5", "--profile", str(table), "--no-mc")
    assert code == cli.EXIT_PASS
    assert "user,finite,finite,regular" in read(d / "phase" / "phase.csv")


def test_alpha_grid_drops_two():
    g = cli.alpha_grid("1.8:2.2:0.1")
    assert g == [1.8, 1.9, 2.1, 2.2]


def test_all_quick_aggregates(tmp_path):
    code, d = run(tmp_path, "all", "--quick")
    assert code in (cli.EXIT_PASS, cli.EXIT_FAIL)
    summary = list(csv.DictReader(read(d / "summary.csv").splitlines()))
    assert [r["experiment"] for r in summary] == cli.ex.ORDER
    assert all(r["status"] in ("PASS", "FAIL") for r in summary)
    assert set(json.loads(read(d / "timings.json"))) == set(cli.ex.ORDER)
