import csv
import json
from pathlib import Path

import pytest

from auctionope.cli import main

SMALL_SETTINGS = """
[settings]
n_per_side = 400
tuning_replicates = 1
oracle_contexts = 5000
optpal_n = 400
"""


def write_plan(dir_, scenario, seeds=(1,), extra=""):
    path = Path(dir_) / f"{scenario}.toml"
    path.write_text(f'scenario = "{scenario}"\nseeds = {list(seeds)}\n{extra}\n{SMALL_SETTINGS}')
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def manifest_hashes(out):
    doc = json.loads((Path(out) / "manifest.json").read_text())
    return {f["path"]: f["sha256"] for f in doc["files"]}


@pytest.fixture(scope="module")
def dvc_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("dvc")
    plan = write_plan(root, "DiscreteVsContinuous")
    assert main(["run-plan", "--config", str(plan), "--out", str(root / "a")]) == 0
    return root, plan


# --- single commands --------------------------------------------------------


def test_simulate_writes_logs_and_lifts(tmp_path, capsys):
    assert main(["simulate", "--n", "300", "--seed", "4", "--out", str(tmp_path)]) == 0
    printed = capsys.readouterr().out.split()
    assert sorted(Path(p).name for p in printed) == ["control.jsonl", "lifts.csv", "lifts.json", "treatment.jsonl"]
    assert len((tmp_path / "control.jsonl").read_text().splitlines()) == 300
    assert [r["metric"] for r in rows(tmp_path / "lifts.csv")] == ["cost", "reach", "resources", "returns"]


def test_simulate_csv_format_and_determinism(tmp_path):
    for d in ("a", "b"):
        assert main(["simulate", "--n", "50", "--seed", "9", "--format", "csv", "--out", str(tmp_path / d)]) == 0
    a, b = (tmp_path / "a" / "treatment.csv").read_bytes(), (tmp_path / "b" / "treatment.csv").read_bytes()
    assert a == b


def test_command_pipeline(tmp_path):
    logs = tmp_path / "logs"
    assert main(["simulate", "--n", "400", "--seed", "2", "--out", str(logs)]) == 0
    trees = ["--trees", "5", "--num-bins", "5"]
    for side in ("control", "treatment"):
        assert main(["fit-proxy", "--log", str(logs / f"{side}.jsonl"), "--out", str(tmp_path / f"proxy_{side}.json"),
                     "--binning-log", str(logs / "control.jsonl"), *trees]) == 0

    report = tmp_path / "report.json"
    assert main([
        "evaluate", "--log", str(logs / "control.jsonl"), "--policy-eval", str(tmp_path / "proxy_treatment.json"),
        "--policy-behavior", str(tmp_path / "proxy_control.json"), "--bandwidth", "0.3", "--out", str(report), *trees,
    ]) == 0
    cells = json.loads(report.read_text())["reports"]
    assert len(cells) == 24 and all("value" in c for c in cells)

    cf = tmp_path / "cf.json"
    assert main([
        "counterfactual", "--test", str(logs), "--replace-side", "control", "--with", str(tmp_path / "proxy_treatment.json"),
        "--estimator", "sndr", "--out", str(cf), *trees,
    ]) == 0
    doc = json.loads(cf.read_text())
    assert len(doc["estimated"]) == 4 and len(doc["observed"]) == 4

    cfg = tmp_path / "optpal.toml"
    cfg.write_text("[optpal]\nlearning_rate = 0.1\nmax_iterations = 20\n[optpal.convergence]\nwindow = 5\nrel_tolerance = 1e-9\n")
    assert main([
        "learn-optimal", "--log", str(logs / "control.jsonl"), "--config", str(cfg),
        "--out", str(tmp_path / "policy_w.json"), "--trace", str(tmp_path / "trace.csv"),
    ]) == 0
    assert len(rows(tmp_path / "trace.csv")) == 21

    oracle = tmp_path / "oracle.json"
    oracle.write_text(json.dumps({"entries": [{"log": "control.jsonl", "policy": "policy_w.json", "value": {"returns": 0.5}}]}))
    tuned = tmp_path / "tuned.json"
    assert main(["tune", "--logs", str(logs), "--oracle", str(oracle), "--metric", "returns", "--out", str(tuned)]) == 0
    assert json.loads(tuned.read_text())["kernel"]["kind"] == "gaussian"


# --- exit codes -----------------------------------------------------------


def test_exit_code_config_error(tmp_path, capsys):
    plan = tmp_path / "p.toml"
    plan.write_text('scenario = "Nonsense"\n')
    assert main(["run-plan", "--config", str(plan), "--out", str(tmp_path / "o")]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "InvalidConfig" and err["exit_code"] == 2


def test_exit_code_data_error(tmp_path):
    assert main(["fit-proxy", "--log", str(tmp_path / "absent.jsonl"), "--out", str(tmp_path / "p.json")]) == 3


def test_exit_code_numeric_error(tmp_path):
    logs = tmp_path / "logs"
    main(["simulate", "--n", "100", "--out", str(logs)])
    main(["fit-proxy", "--log", str(logs / "control.jsonl"), "--trees", "2", "--out", str(tmp_path / "p.json")])
    oracle = tmp_path / "oracle.json"
    oracle.write_text(json.dumps({"entries": [{"log": "control.jsonl", "policy": "p.json", "value": 0.0}]}))
    assert main(["tune", "--logs", str(logs), "--oracle", str(oracle), "--out", str(tmp_path / "t.json")]) == 4


def test_failed_plan_keeps_partial_manifest(tmp_path):
    scen = tmp_path / "scenario.toml"
    scen.write_text(
        "[auction]\ndimension = 1\nconversion_weights = [0.0]\nvalue_weights = [1.0]\n"
        '[policy.X]\nkind = "constant"\npayment = 0.0\n'
        '[policy.Y]\nkind = "constant"\npayment = 1.0\n'
        '[policy.Z]\nkind = "constant"\npayment = 2.0\n'
    )
    plan = write_plan(tmp_path, "AbTest", extra='scenario_config = "scenario.toml"')
    assert main(["run-plan", "--config", str(plan), "--out", str(tmp_path / "o")]) == 4
    doc = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert doc["status"] == "error"
    assert doc["error"]["error"] == "ZeroControl"


# --- plans and reports ----------------------------------------------------


def test_discrete_vs_continuous_outputs(dvc_run):
    root, _ = dvc_run
    files = manifest_hashes(root / "a")
    for name in ("mape_discrete.csv", "mape_continuous.csv"):
        assert name in files
        assert [r["metric"] for r in rows(root / "a" / name)] == ["cost", "reach", "resources", "returns"]


def test_plan_rerun_is_bit_identical(dvc_run, monkeypatch):
    root, plan = dvc_run
    monkeypatch.setenv("OPE_THREADS", "1")
    assert main(["run-plan", "--config", str(plan), "--out", str(root / "b")]) == 0
    assert manifest_hashes(root / "a") == manifest_hashes(root / "b")


def test_report_for_discrete_vs_continuous(dvc_run, tmp_path):
    root, _ = dvc_run
    assert main(["report", "--manifest", str(root / "a" / "manifest.json"), "--out", str(tmp_path)]) == 0
    summary = rows(tmp_path / "summary.csv")
    assert len(summary) == 8
    assert list(summary[0]) == ["scenario", "metric", "estimator", "value", "ci_low", "ci_high", "truth"]


def test_report_on_empty_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"scenario": "AbTest", "files": []}))
    assert main(["report", "--manifest", str(tmp_path / "manifest.json")]) == 0
    assert rows(tmp_path / "summary.csv") == []


def test_report_rejects_tampered_artifact(dvc_run, tmp_path, capsys):
    root, plan = dvc_run
    out = tmp_path / "run"
    assert main(["run-plan", "--config", str(plan), "--out", str(out)]) == 0
    with open(out / "mape_discrete.csv", "a") as fh:
        fh.write("extra,row,,,\n")
    assert main(["report", "--manifest", str(out / "manifest.json")]) == 3
    assert "MissingArtifact" in capsys.readouterr().err


def test_counterfactual_plan_table(tmp_path):
    plan = write_plan(tmp_path, "CounterfactualYZ")
    assert main(["run-plan", "--config", str(plan), "--out", str(tmp_path / "o")]) == 0
    table = rows(tmp_path / "o" / "cf_lifts.csv")
    assert len(table) == 4
    assert list(table[0]) == ["metric", "estimated", "actual"]
