import csv
import json
import subprocess
import sys

import pytest

from pesmoc import cli, driver


def run_cli(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture()
def fast_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(dict(M=2, hyper_samples=2, pool_size=50, pareto_grid=150, local_steps=3,
                                    recommend_grid=600, slice_burn=5, slice_thin=1)))
    return path


def test_generate_run_score_surface(tmp_path, fast_config):
    prob = tmp_path / "toy.json"
    assert run_cli("generate", "--toy", "--out", prob) == 0
    trace = tmp_path / "trace.json"
    assert run_cli("run", "--problem", prob, "--strategy", "pesmoc", "--budget", 5, "--seed", 2,
                   "--config", fast_config, "--out", trace) == 0
    doc = json.loads(trace.read_text())
    assert doc["schema"] == driver.TRACE_SCHEMA and len(doc["records"]) == 5
    metrics = tmp_path / "m.csv"
    assert run_cli("score", "--trace", trace, "--problem", prob, "--out", metrics) == 0
    rows = list(csv.reader(open(metrics)))
    assert rows[0] == ["iteration", "hv_rec", "log_gap"] and len(rows) == 4
    surf = tmp_path / "s.csv"
    assert run_cli("acq-surface", "--trace", trace, "--iter", 4, "--resolution", 5, "--out", surf) == 0
    rows = list(csv.reader(open(surf)))
    assert rows[0] == ["x1", "x2", "alpha"] and len(rows) == 26


def test_generate_synthetic(tmp_path):
    out = tmp_path / "p.json"
    assert run_cli("generate", "--d", 2, "--k", 2, "--c", 1, "--seed", 5, "--out", out) == 0
    spec = json.loads(out.read_text())
    assert spec["kind"] == "synthetic" and spec["K"] == 2 and spec["C"] == 1


def test_bench(tmp_path, fast_config):
    out = tmp_path / "rep"
    assert run_cli("bench", "--problems", 1, "--scenario", "noiseless", "--budget", 4, "--seeds", "0..1",
                   "--strategies", "random", "--config", fast_config, "--out", out) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seeds"] == [0, 1] and (out / "random.csv").exists()


def test_config_errors_exit_2(tmp_path):
    assert run_cli("run", "--problem", tmp_path / "missing.json", "--out", tmp_path / "t.json") == 2
    assert run_cli("frobnicate") == 2
    prob = tmp_path / "toy.json"
    run_cli("generate", "--toy", "--out", prob)
    assert run_cli("run", "--problem", prob, "--budget", 1, "--out", tmp_path / "t.json") == 2
    assert run_cli("bench", "--seeds", "5..2", "--out", tmp_path / "r") == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert run_cli("score", "--trace", tmp_path / "bad.json", "--problem", prob, "--out", tmp_path / "m.csv") == 2


def test_acq_surface_rejects_non_2d(tmp_path, fast_config):
    prob = tmp_path / "p.json"
    run_cli("generate", "--d", 1, "--k", 1, "--c", 1, "--seed", 0, "--out", prob)
    trace = tmp_path / "t.json"
    assert run_cli("run", "--problem", prob, "--strategy", "random", "--budget", 3, "--config", fast_config,
                   "--out", trace) == 0
    assert run_cli("acq-surface", "--trace", trace, "--iter", 3, "--out", tmp_path / "s.csv") == 2


def test_numerical_failure_exit_3(monkeypatch, tmp_path):
    from pesmoc.gp import NumericalError

    def boom(*a, **k):
        raise NumericalError("not positive definite")

    monkeypatch.setattr(driver, "run", boom)
    prob = tmp_path / "toy.json"
    run_cli("generate", "--toy", "--out", prob)
    assert run_cli("run", "--problem", prob, "--out", tmp_path / "t.json") == 3


def test_parse_seeds():
    assert cli.parse_seeds("3") == [3]
    assert cli.parse_seeds("3..5") == [3, 4, 5]
    assert cli.parse_seeds("1,4") == [1, 4]
    with pytest.raises(driver.ConfigError):
        cli.parse_seeds("a..b")


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "pesmoc.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for name in ("generate", "run", "bench", "score", "acq-surface"):
        assert name in out.stdout
