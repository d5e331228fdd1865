import csv
import json
from pathlib import Path

import pytest

from voictl.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_bad_lambda_exits_1_and_names_field(capsys):
    assert main(["validate", str(CONFIGS / "bad.json")]) == 1
    assert "lambda" in capsys.readouterr().err


def test_unknown_subcommand():
    assert main(["frobnicate", str(CONFIGS / "scalar.json")]) == 64


def test_usage_errors():
    assert main([]) == 64
    assert main(["simulate", "--episodes", "many"]) == 64


def test_missing_config_file(capsys, tmp_path):
    assert main(["validate", str(tmp_path / "nope.json")]) == 1
    assert "config" in capsys.readouterr().err


def test_riccati_rows(tmp_path):
    assert main(["riccati", "--config", str(CONFIGS / "scalar.json"), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "riccati.csv").read_text().splitlines()
    assert lines[0].startswith("#") and "column-major" in lines[0]
    rows = list(csv.DictReader(lines[1:]))
    assert float(rows[0]["S_1_1"]) == pytest.approx(1.6, abs=1e-14)
    assert float(rows[0]["L_1_1"]) == pytest.approx(0.6, abs=1e-14)
    assert len(rows) == 3


def test_dp_outputs(tmp_path):
    assert main(["dp", str(CONFIGS / "tiny.json"), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(l for l in (tmp_path / "values.csv").read_text().splitlines()))
    assert set(rows[0]) == {"stage", "e", "V", "rho", "voi", "delta"}
    th = list(csv.DictReader(l for l in (tmp_path / "thresholds.csv").read_text().splitlines()
                             if not l.startswith("#")))
    assert th[-1]["threshold"] == "inf"


def test_simulate_summary_echoes_config(tmp_path):
    code = main(["simulate", str(CONFIGS / "scalar.json"), "--episodes", "50", "--seed", "123",
                 "--out", str(tmp_path), "--trace-out", "--policy", "periodic:2"])
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["seed"] == 123
    assert summary["config"]["episodes"] == 50
    assert summary["config"]["model"]["lambda"] == 0.5
    assert summary["trigger"] == "periodic(2)"
    assert len(list((tmp_path / "traces").glob("episode_*.csv"))) == 50
    assert (tmp_path / "episodes.csv").exists()


def test_simulate_bad_policy(capsys):
    assert main(["simulate", str(CONFIGS / "scalar.json"), "--policy", "telepathy", "--episodes", "5"]) == 1
    assert "policy" in capsys.readouterr().err


def test_bad_seed():
    assert main(["simulate", str(CONFIGS / "scalar.json"), "--seed", "-1"]) == 1


def test_multisensor_runs(tmp_path):
    assert main(["simulate", str(CONFIGS / "multisensor.json"), "--episodes", "100", "--out", str(tmp_path)]) == 0
    assert main(["dp", str(CONFIGS / "multisensor.json")]) == 0


def test_sweep(tmp_path):
    cfg = json.loads((CONFIGS / "tiny.json").read_text())
    cfg["lambdas"] = [0.2, 0.8]
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert main(["sweep", str(path), "--episodes", "500", "--out", str(tmp_path)]) == 0
    rows = json.loads((tmp_path / "sweep.json").read_text())["rows"]
    assert [r["lambda"] for r in rows] == [0.2, 0.8]


def test_verify_tiny_passes(capsys):
    assert main(["verify", str(CONFIGS / "tiny.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert all(c["status"] in ("pass", "skip") for c in report["checks"])
    assert any(c["name"] == "dp_vs_enumeration" and c["status"] == "pass" for c in report["checks"])


def test_verify_failure_exit_code(tmp_path, monkeypatch):
    import voictl.oracle as oracle

    monkeypatch.setattr(oracle, "run_checks", lambda model, cfg: {
        "checks": [{"name": "forced", "status": "fail"}], "summary": {"pass": 0, "fail": 1, "skip": 0}})
    assert main(["verify", str(CONFIGS / "tiny.json")]) == 2
