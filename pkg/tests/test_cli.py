import csv
import json
import math
import os

import numpy as np
import pytest

from structgp.cli import main
from structgp.structure import is_acyclic

FAST = ["--lambda-grid", "0.1", "--inner-steps", "40", "--max-outer", "4", "--batch-size", "8",
        "--noise-mode", "fixed", "--noise-init", "0.1", "--n-boot", "50"]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    sim = root / "sim"
    assert main(["simulate", "--out", str(sim), "--k", "3", "--r", "16", "--obs-per-task", "10",
                 "--mean-degree", "1.5", "--seed", "2"]) == 0
    fit = root / "fit"
    assert main(["fit", "--data", str(sim / "observations.csv"), "--out", str(fit), *FAST]) == 0
    return root, sim, fit


def test_simulate_default_config(tmp_path):
    assert main(["simulate", "--out", str(tmp_path)]) == 0
    assert len(read_rows(tmp_path / "observations.csv")) == 100 * 10 * 25
    truth = json.loads((tmp_path / "truth.json").read_text())
    assert is_acyclic(np.array(truth["adjacency"], dtype=bool))
    assert truth["config"]["seed"] == 0


def test_simulate_byte_identical(tmp_path):
    args = ["--k", "3", "--r", "4", "--obs-per-task", "5", "--seed", "9"]
    assert main(["simulate", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["simulate", "--out", str(tmp_path / "b"), *args]) == 0
    assert (tmp_path / "a/observations.csv").read_bytes() == (tmp_path / "b/observations.csv").read_bytes()
    assert main(["simulate", "--out", str(tmp_path / "c"), "--k", "3", "--r", "4",
                 "--obs-per-task", "5", "--seed", "10"]) == 0
    assert (tmp_path / "a/observations.csv").read_bytes() != (tmp_path / "c/observations.csv").read_bytes()


def test_simulate_oracle_recovery_with_figure(tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--k", "3", "--r", "4", "--obs-per-task", "3",
                 "--recovery", "--oracle", "--subject-counts", "3,5", "--repetitions", "2"]) == 0
    summary = json.loads((tmp_path / "recovery_summary.json").read_text())
    assert summary["settings"]["5"]["shd"]["median"] == 0
    assert summary["config"]["mode"] == "structgp"
    assert (tmp_path / "recovery.png").stat().st_size > 0


def test_fit_outputs(small_run):
    _, _, fit = small_run
    for name in ("bundle.json", "graph.dot", "structure.json", "fit_report.json", "graph.png"):
        assert (fit / name).exists(), name
    report = json.loads((fit / "fit_report.json").read_text())
    assert report["acyclic"] is True
    assert report["config"]["lambda_grid"] == [0.1]
    assert json.loads((fit / "bundle.json").read_text())["config"]["inner_steps"] == 40


def test_fit_deterministic(small_run, tmp_path):
    _, sim, fit = small_run
    assert main(["fit", "--data", str(sim / "observations.csv"), "--out", str(tmp_path), *FAST]) == 0
    assert (tmp_path / "bundle.json").read_bytes() == (fit / "bundle.json").read_bytes()


def test_windowed_forecast_beats_prior(small_run):
    root, sim, fit = small_run
    out = root / "forecast.csv"
    obs = sim / "observations.csv"
    assert main(["predict", "--bundle", str(fit / "bundle.json"), "--query", str(obs),
                 "--condition", str(obs), "--condition-before", "7", "--query-after", "7",
                 "--out", str(out), "--plot", str(root / "forecast.png")]) == 0
    rows = read_rows(out)
    assert rows and all(float(r["time"]) > 7 for r in rows)
    assert (root / "forecast.png").stat().st_size > 0
    truth = {(r["subject_id"], r["task_id"], float(r["time"])): float(r["value"]) for r in read_rows(obs)}
    y = np.array([truth[(r["subject_id"], r["task_id"], float(r["time"]))] for r in rows])
    m = np.array([float(r["mean"]) for r in rows])
    assert np.sqrt(np.mean((m - y) ** 2)) < np.sqrt(np.mean(y ** 2))
    sidecar = json.loads((root / "forecast.csv.config.json").read_text())
    assert sidecar["condition_before"] == 7 and "config" in sidecar

    metrics = root / "metrics.json"
    assert main(["eval", "--forecast", str(out), "--truth", str(obs), "--out", str(metrics), "--n-boot", "100"]) == 0
    res = json.loads(metrics.read_text())
    assert res["overall"]["rmse"] == pytest.approx(np.sqrt(np.mean((m - y) ** 2)), rel=1e-9)
    assert set(res["per_task"]) <= {"0", "1", "2"}
    assert res["config"]["n_boot"] == 100 and len(res["bootstrap_ci95"]["rmse"]) == 2


def test_predict_prior_without_conditioning(small_run, tmp_path):
    _, _, fit = small_run
    q = tmp_path / "q.csv"
    q.write_text("subject_id,task_id,time\nz,0,1.0\nz,2,3.5\n")
    out = tmp_path / "f.csv"
    assert main(["predict", "--bundle", str(fit / "bundle.json"), "--query", str(q), "--out", str(out)]) == 0
    for r in read_rows(out):
        assert float(r["mean"]) == 0.0
        assert float(r["variance"]) == pytest.approx(1.01, rel=1e-12)


def test_eval_perfect_forecast(tmp_path):
    truth = tmp_path / "truth.csv"
    truth.write_text("subject_id,task_id,time,value\na,0,1.0,0.5\na,1,2.0,-1.0\nb,0,1.0,2.0\n")
    fc = tmp_path / "fc.csv"
    fc.write_text("subject_id,task_id,time,mean,variance,lo95,hi95\n"
                  "a,0,1.0,0.5,0.1,0.0,1.0\na,1,2.0,-1.0,0.1,-2.0,0.0\nb,0,1.0,2.0,0.1,1.0,3.0\n")
    out = tmp_path / "m.json"
    assert main(["eval", "--forecast", str(fc), "--truth", str(truth), "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert res["overall"]["rmse"] == 0.0 and res["overall"]["coverage"] == 1.0
    assert res["macro"]["rmse"] == 0.0


def test_export_graph(small_run, tmp_path):
    _, _, fit = small_run
    assert main(["export-graph", "--bundle", str(fit / "bundle.json"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "graph.dot").read_text().startswith("digraph")
    assert (tmp_path / "graph.png").exists()


def test_config_file_and_flag_override(small_run, tmp_path):
    _, sim, _ = small_run
    cfg = tmp_path / "run.toml"
    cfg.write_text('mode = "independent"\nmax_steps = 30\nseed = 4\n')
    out = tmp_path / "fit"
    assert main(["fit", "--data", str(sim / "observations.csv"), "--out", str(out), "--config", str(cfg),
                 "--max-steps", "20"]) == 0
    echoed = json.loads((out / "fit_report.json").read_text())["config"]
    assert echoed["mode"] == "independent" and echoed["max_steps"] == 20 and echoed["seed"] == 4


class TestExitCodes:
    def test_config_errors(self, tmp_path, small_run):
        _, sim, _ = small_run
        data = str(sim / "observations.csv")
        assert main(["fit", "--data", data, "--out", str(tmp_path), "--gamma", "2"]) == 2
        bad = tmp_path / "bad.toml"
        bad.write_text("nonsense_key = 1\n")
        assert main(["fit", "--data", data, "--out", str(tmp_path), "--config", str(bad)]) == 2
        assert main(["fit", "--data", data, "--out", str(tmp_path), "--lambda-grid", "0.1,1"]) == 2

    @pytest.mark.skipif(os.geteuid() == 0, reason="root can write anywhere")
    def test_unwritable_output(self, tmp_path):
        ro = tmp_path / "ro"
        ro.mkdir()
        ro.chmod(0o500)
        assert main(["simulate", "--out", str(ro / "x"), "--k", "2", "--mean-degree", "1"]) == 2

    def test_output_is_a_file(self, tmp_path):
        f = tmp_path / "file"
        f.write_text("")
        assert main(["simulate", "--out", str(f / "x"), "--k", "2", "--mean-degree", "1"]) == 2

    def test_data_errors(self, tmp_path, small_run):
        _, _, fit = small_run
        assert main(["fit", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 3
        broken = tmp_path / "broken.csv"
        broken.write_text("subject_id,task_id,time,value\n1,0,abc,1.0\n")
        assert main(["fit", "--data", str(broken), "--out", str(tmp_path)]) == 3
        q = tmp_path / "q.csv"
        q.write_text("subject_id,task_id,time\nz,nosuchtask,1.0\n")
        assert main(["predict", "--bundle", str(fit / "bundle.json"), "--query", str(q),
                     "--out", str(tmp_path / "f.csv")]) == 3
        fc = tmp_path / "fc.csv"
        fc.write_text("subject_id,task_id,time,mean,variance,lo95,hi95\na,0,9.0,0,1,-2,2\n")
        truth = tmp_path / "t.csv"
        truth.write_text("subject_id,task_id,time,value\na,0,1.0,0.5\n")
        assert main(["eval", "--forecast", str(fc), "--truth", str(truth), "--out", str(tmp_path / "m.json")]) == 3

    def test_numerical_failure(self, tmp_path):
        data = tmp_path / "d.csv"
        data.write_text("subject_id,task_id,time,value\n1,0,0.0,1.0\n1,0,1.0,nan\n")
        code = main(["fit", "--data", str(data), "--out", str(tmp_path / "o"), "--mode", "independent",
                     "--max-steps", "5"])
        assert code in (3, 4)
