import glob
import json
import os
import subprocess
import sys

import pytest

from conftest import hcdr_fixture
from relcredit import cli

TINY = {
    "seed": 0,
    "data": {"source": "synthetic",
             "synth": {"n_customers": 300, "mean_bureau": 2.0, "mean_previous": 1.0, "mean_installments": 2.0,
                       "mean_pos_cash": 1.0, "mean_credit_card": 0.5}},
    "gnn": {"fanout": [5, 5], "train": {"epochs": 2, "batch_size": 128},
            "sage": {"hidden_dim": 16}, "relattn": {"hidden_dim": 16, "heads": 2}},
    "contrastive": {"pretrain": {"epochs": 2, "batch_size": 128, "proj_hidden": 16, "proj_out": 8}},
    "tabular": {"gbdt": {"min_data_in_leaf": 10, "max_iterations": 30, "early_stopping_rounds": 10,
                         "split_mode": "histogram"}},
}


def _config(tmp_path, cfg=None, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg if cfg is not None else TINY))
    return str(p)


def _run_cli(*args):
    return subprocess.run([sys.executable, "-m", "relcredit.cli", *args], capture_output=True, text=True)


def _artifact_hashes(out):
    """Every manifest minus its wall time."""
    res = {}
    for p in sorted(glob.glob(os.path.join(out, "manifests", "*.json"))):
        with open(p) as fh:
            m = json.load(fh)
        m.pop("wall_time_s")
        m["config"].pop("out")
        res[os.path.basename(p)] = m
    return res


def test_unknown_config_key_exits_1(tmp_path, capsys):
    cfg = dict(TINY, bogus=1)
    assert cli.main(["eda", "--config", _config(tmp_path, cfg), "--out", str(tmp_path / "r")]) == 1
    assert "unknown keys" in capsys.readouterr().err


def test_missing_config_file_exits_1(tmp_path):
    assert cli.main(["eda", "--config", str(tmp_path / "nope.json")]) == 1


def test_bad_usage_exits_1():
    with pytest.raises(SystemExit) as e:
        cli.main(["no-such-command"])
    assert e.value.code == 1


def test_stage_out_of_order_names_prerequisite(tmp_path, capsys):
    rc = cli.main(["train-tabular", "--config", _config(tmp_path), "--out", str(tmp_path / "r")])
    assert rc == 1
    assert "run `features` first" in capsys.readouterr().err


def test_invalid_labels_exit_2(tmp_path, capsys):
    data = tmp_path / "data"
    data.mkdir()
    hcdr_fixture(str(data), app_rows=[(1, 0), (2, 2)])
    cfg = {"data": {"source": "directory", "directory": str(data)}}
    assert cli.main(["eda", "--config", _config(tmp_path, cfg), "--out", str(tmp_path / "r")]) == 2
    assert "data validation failed" in capsys.readouterr().err


def test_divergence_exits_3(tmp_path, capsys):
    cfg = json.loads(json.dumps(TINY))
    cfg["gnn"]["train"]["lr"] = 1e30
    path, out = _config(tmp_path, cfg), str(tmp_path / "r")
    assert cli.main(["build-graph", "--config", path, "--out", out]) == 0
    with pytest.warns(RuntimeWarning):
        rc = cli.main(["train-gnn", "--arch", "sage", "--config", path, "--out", out])
    assert rc == 3
    assert "diverged" in capsys.readouterr().err


def test_evaluate_external_scores(tmp_path):
    scores = tmp_path / "s.csv"
    scores.write_text("row_id,score,label,grp\n1,0.9,1,a\n2,0.8,0,a\n3,0.3,1,b\n4,0.1,0,b\n")
    out = tmp_path / "r"
    assert cli.main(["evaluate", "--scores", str(scores), "--out", str(out)]) == 0
    res = json.loads((out / "eval" / "external.json").read_text())
    assert res["roc_auc"] == 0.75
    assert res["n"] == 4 and res["prevalence"] == 0.5


def test_full_run_is_deterministic_across_thread_settings(tmp_path):
    path = _config(tmp_path)
    runs = []
    for i, threads in enumerate(("1", "4")):
        out = str(tmp_path / f"run{i}")
        r = _run_cli("all", "--config", path, "--out", out, "--threads", threads)
        assert r.returncode == 0, r.stderr
        runs.append(_artifact_hashes(out))
    assert set(runs[0]) == {f"{s}.json" for s in
                            ("eda", "features", "build-graph", "train-gnn", "pretrain", "extract-embeddings",
                             "train-tabular", "train-hybrid", "evaluate", "fairness-audit", "report")}
    assert runs[0] == runs[1]
    assert os.path.exists(tmp_path / "run0" / "report" / "report.md")


def test_seed_flag_changes_model_artifacts(tmp_path):
    path = _config(tmp_path)
    hashes = []
    for seed in ("1", "2"):
        out = str(tmp_path / f"s{seed}")
        common = ["--config", path, "--out", out, "--seed", seed]
        assert cli.main(["build-graph", *common]) == 0
        assert cli.main(["train-gnn", "--arch", "sage", *common]) == 0
        hashes.append(_artifact_hashes(out)["train-gnn.json"]["artifacts"])
    assert hashes[0] != hashes[1]
