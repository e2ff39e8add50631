import json
from importlib import resources

import numpy as np
import pytest

from tpsqr.cli import main

EXAMPLE = str(resources.files("tpsqr") / "data" / "example_events.csv")
EXAMPLE_HEADER = str(resources.files("tpsqr") / "data" / "example_header.json")


def run(*argv):
    return main([str(a) for a in argv])


def read_tree(root):
    return {p.name: p.read_bytes() for p in sorted(root.iterdir())}


def test_aggregate_example(tmp_path, capsys):
    assert run("aggregate", "--events", EXAMPLE, "--header", EXAMPLE_HEADER, "--out", tmp_path) == 0
    lines = (tmp_path / "aggregated.csv").read_text().splitlines()
    subject1 = [l.split(",")[2:] for l in lines[1:] if l.startswith("1,")]
    assert subject1 == [["1", "1", "1"], ["121", "2", "1"], ["231", "3", "2"], ["361", "1", "0"]]
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["n_subjects"] == 2 and summary["p"] == 3
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert set(manifest["outputs"]) == {"aggregated.csv", "summary.json"}
    assert {"config_hash", "seed", "versions"} <= set(manifest)


def test_aggregate_empty_input(tmp_path):
    src = tmp_path / "empty.csv"
    src.write_text("subject_id,timestamp,event_type\n")
    assert run("aggregate", "--events", src, "--out", tmp_path / "o") == 0
    assert (tmp_path / "o" / "aggregated.csv").read_text() == "subject_id,span_index,t,o,x\n"
    assert json.loads((tmp_path / "o" / "summary.json").read_text())["n_subjects"] == 0


def test_aggregate_tie_exits_2_with_line(tmp_path, capsys):
    src = tmp_path / "bad.csv"
    src.write_text("subject_id,timestamp,event_type\na,1,1\na,4,2\na,4,3\n")
    assert run("aggregate", "--events", src, "--out", tmp_path / "o") == 2
    assert "line 4" in capsys.readouterr().err


def test_min_duration_excludes_short_subjects(tmp_path):
    # subject 1 spans 360 time units, subject 2 spans 325
    assert run("aggregate", "--events", EXAMPLE, "--min-duration", 350, "--out", tmp_path) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["n_subjects"] == 1 and summary["excluded_subjects"] == 1


def test_missing_input_and_bad_config(tmp_path, capsys):
    assert run("fit", "--events", tmp_path / "nope.csv", "--out", tmp_path) == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"not_a_key": 1}))
    assert run("fit", "--config", cfg, "--out", tmp_path) == 2
    assert "not_a_key" in capsys.readouterr().err
    assert run("fit", "--events", EXAMPLE, "--thresholds", "0,5,3", "--out", tmp_path) == 2


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"events": EXAMPLE, "seed": 3, "preset": "adr", "min_duration": 0}))
    assert run("aggregate", "--config", cfg, "--seed", 7, "--out", tmp_path / "o") == 0
    recorded = json.loads((tmp_path / "o" / "manifest.json").read_text())["config"]
    assert recorded["seed"] == 7
    assert recorded["discount"] == {"lambda1": 0.1, "lambda2": 0.1, "count_offset": 1}
    assert recorded["t_ambiguity"] == 175.0
    assert recorded["min_duration"] == 0


def test_fit_null_endpoint(tmp_path):
    out = tmp_path / "o"
    assert run("fit", "--events", EXAMPLE, "--thresholds", "0,100,200,300", "--lam", 10.0, "--out", out) == 0
    report = json.loads((out / "fit_report.json").read_text())
    assert report["active_set_size"] == 0
    tpl = json.loads((out / "template.json").read_text())
    assert tpl["w"] == []


def test_select_on_simulated_graph(tmp_path):
    sim = tmp_path / "sim"
    args = ["--set", "simulate.p=4", "--set", "simulate.edge_count=2", "--set", "simulate.n_samples=800"]
    assert run("simulate", *args, "--seed", 2, "--out", sim) == 0
    out = tmp_path / "sel"
    assert run("select", "--samples", sim / "samples.csv", "--n-lambdas", 20, "--out", out) == 0
    report = json.loads((out / "selected_report.json").read_text())
    path = json.loads((out / "path_report.json").read_text())
    assert report["aic"] == min(path["aic"])
    assert report["kkt_residual"] < 1e-6


def test_simulate_decoupled_model_is_uncorrelated(tmp_path):
    model = tmp_path / "m.json"
    model.write_text(json.dumps({"p": 2, "theta": [[0.3, 0.0], [0.0, -0.2]]}))
    args = ["--set", f"simulate.model={model}", "--set", "simulate.n_samples=20000", "--set", "simulate.thin=1"]
    assert run("simulate", *args, "--out", tmp_path / "o") == 0
    samples = np.loadtxt(tmp_path / "o" / "samples.csv", delimiter=",", skiprows=1)
    assert abs(np.corrcoef(samples.T)[0, 1]) < 0.03


def test_simulate_tail_violation_exits_3(tmp_path, capsys):
    model = tmp_path / "m.json"
    model.write_text(json.dumps({"p": 2, "theta": [[0.5, 5.0], [5.0, 0.5]]}))
    assert run("simulate", "--set", f"simulate.model={model}", "--out", tmp_path / "o") == 3
    assert "model:" in capsys.readouterr().err


def test_evaluate_auc_scores(tmp_path):
    scores = tmp_path / "s.csv"
    scores.write_text("score,label\n0.9,1\n0.4,0\n0.6,1\n0.1,0\n")
    assert run("evaluate", "--set", "evaluate.kind=auc", "--set", f"evaluate.scores={scores}", "--out", tmp_path / "a") == 0
    assert json.loads((tmp_path / "a" / "auc.json").read_text())["auc"] == 1.0
    scores.write_text("score,label\n0.5,1\n0.5,0\n0.5,1\n")
    assert run("evaluate", "--set", "evaluate.kind=auc", "--set", f"evaluate.scores={scores}", "--out", tmp_path / "b") == 0
    assert json.loads((tmp_path / "b" / "auc.json").read_text())["auc"] == 0.5


def test_evaluate_sparsistency_small(tmp_path):
    args = ["--set", "evaluate.p=4", "--set", "evaluate.edge_count=2", "--set", "evaluate.sample_sizes=[50,400]",
            "--set", "evaluate.trials=2", "--n-lambdas", 10]
    assert run("evaluate", *args, "--out", tmp_path / "o") == 0
    rep = json.loads((tmp_path / "o" / "sparsistency.json").read_text())
    assert set(rep["per_n"]) == {"50", "400"}
    assert "wall_clock_seconds" not in rep["per_n"]["50"]
    rows = (tmp_path / "o" / "sparsistency_rows.csv").read_text().splitlines()
    assert len(rows) == 5


@pytest.mark.parametrize(
    "argv",
    [
        ["aggregate", "--events", EXAMPLE],
        ["select", "--events", EXAMPLE, "--thresholds", "0,100,200,300", "--n-lambdas", "8"],
        ["simulate", "--set", "simulate.p=4", "--set", "simulate.edge_count=2", "--set", "simulate.n_samples=200"],
        ["simulate", "--set", "simulate.kind=led", "--set", "simulate.n_subjects=30"],
    ],
)
def test_reruns_are_byte_identical(tmp_path, argv):
    assert run(*argv, "--seed", 4, "--out", tmp_path / "a") == 0
    assert run(*argv, "--seed", 4, "--out", tmp_path / "b") == 0
    assert read_tree(tmp_path / "a") == read_tree(tmp_path / "b")
