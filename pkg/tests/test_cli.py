import csv

import pytest
import yaml

from islandgrid.cli import EXIT_BLOWUP, EXIT_CHECK, EXIT_CONFIG, EXIT_OK, main

from test_engine import SINGLE


@pytest.fixture
def single(tmp_path):
    p = tmp_path / "single.yaml"
    p.write_text(SINGLE)
    return p


def test_validate(capsys, single):
    assert main(["validate", "--config", "table1"]) == EXIT_OK
    assert "4 DGs" in capsys.readouterr().out
    assert main(["validate", "--config", str(single)]) == EXIT_OK


def test_bad_config_exit_code(capsys, tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text(SINGLE.replace("preset: DG1", "preset: DG9"))
    assert main(["validate", "--config", str(p)]) == EXIT_CONFIG
    assert "bad.yaml:" in capsys.readouterr().err
    assert main(["validate", "--config", "no-such-config"]) == EXIT_CONFIG


def test_run_writes_trace_slices_and_summary(capsys, single, tmp_path):
    out = tmp_path / "trace.csv"
    slices = tmp_path / "slices"
    rc = main(["run", "--config", str(single), "--out", str(out), "--slices", str(slices), "--check"])
    assert rc == EXIT_OK
    summary = yaml.safe_load(capsys.readouterr().out)
    assert summary["violations"] == []
    assert summary["windows"][1]["settled"] is True
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "t" and len(rows) == 3001
    assert sorted(p.name for p in slices.iterdir()) == ["observer.csv", "power.csv", "surface.csv",
                                                       "voltage.csv"]
    with open(slices / "power.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["t", "P_DG1", "Q_DG1", "V", "omega_com"]


def test_check_failure_exit_code(capsys, tmp_path):
    p = tmp_path / "weak.yaml"
    p.write_text(SINGLE.replace("events:", "controller: {c: 0.01, d: 0.01, alpha: 0.001, beta: 0.01}\nevents:"))
    assert main(["run", "--config", str(p), "--check"]) == EXIT_CHECK
    assert "not settled" in capsys.readouterr().err


def test_blowup_exit_code(capsys, tmp_path):
    p = tmp_path / "stiff.yaml"
    p.write_text(SINGLE.replace("  lines: []", "  kappa: 1.0e+9\n  lines: []"))
    out = tmp_path / "partial.csv"
    assert main(["run", "--config", str(p), "--out", str(out)]) == EXIT_BLOWUP
    assert out.exists()
    assert "blowup" in capsys.readouterr().err


def test_sweep(capsys, single, tmp_path):
    rc = main(["sweep", "--config", str(single), "--variances", "0.01", "--out-dir", str(tmp_path / "sw")])
    assert rc == EXIT_OK
    table = yaml.safe_load(capsys.readouterr().out)["sweep"]
    assert {row["observer"] for row in table} == {True, False}
    assert (tmp_path / "sw" / "var0.01_eskbf.csv").exists()
    assert main(["sweep", "--config", str(single), "--variances", "x", "--out-dir", str(tmp_path)]) == EXIT_CONFIG
