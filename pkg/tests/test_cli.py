import json

import pytest
import yaml

from graphprompt.autodiff import corrupt_backward
from graphprompt.cli import build_parser, main

CONFIG = {
    "dataset": {"name": "toy", "synthetic": {
        "num_graphs": 30, "nodes_per_graph": [8, 12], "feature_dim": 4, "graph_class_count": 2, "seed": 3}},
    "pretrain": {"triplets_per_graph": 5, "max_epochs": 2},
    "tune": {"max_epochs": 3},
    "protocol": {"level": "graph", "k": 2, "num_tasks": 2},
    "jobs": 1,
}


def write_config(tmp_path, doc=None, name="cfg.yaml"):
    doc = CONFIG if doc is None else doc
    doc = {**doc, "output_dir": str(tmp_path / "runs")} if "output_dir" not in doc else doc
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return path


def test_pretrain_writes_identical_checkpoints(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "a.json")]) == 0
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 2 and out[0].startswith("pretrained toy:")
    assert json.loads((tmp_path / "a.json").read_text())["run_config"]["seed"] == 0


def test_missing_dataset_path(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("GRAPHPROMPT_DATA", raising=False)
    cfg = write_config(tmp_path, {"dataset": {"name": "PROTEINS"}})
    assert main(["eval", "--config", str(cfg)]) == 2
    assert "dataset.path" in capsys.readouterr().err


def test_unknown_key(tmp_path, capsys):
    cfg = write_config(tmp_path, {**CONFIG, "pretrian": {}})
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "x.json")]) == 2
    assert "pretrian" in capsys.readouterr().err
    assert not (tmp_path / "x.json").exists()


def test_dimension_mismatch(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "c.json")]) == 0
    other = {**CONFIG, "dataset": {"name": "wide", "synthetic": {**CONFIG["dataset"]["synthetic"], "feature_dim": 6}}}
    cfg2 = write_config(tmp_path, other, "wide.yaml")
    assert main(["eval", "--config", str(cfg2), "--ckpt", str(tmp_path / "c.json")]) == 4
    err = capsys.readouterr().err
    assert "6" in err and "4" in err


def test_sampling_failure_exit_code(tmp_path):
    cfg = write_config(tmp_path, {**CONFIG, "protocol": {"level": "graph", "k": 40, "num_tasks": 1}})
    assert main(["eval", "--config", str(cfg)]) == 3


def test_gradcheck_pass_and_corrupted(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "gradcheck passed" in out
    with corrupt_backward("matmul"):
        assert main(["gradcheck", "--seeds", "1"]) == 5
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_module_filter(capsys):
    assert main(["gradcheck", "--module", "prompt", "--seeds", "1"]) == 0
    rows = capsys.readouterr().out.splitlines()[1:-1]
    assert rows and all("prompt" in r and "pretrain" not in r for r in rows)


@pytest.mark.parametrize("command", ["pretrain", "eval", "ablate", "tune", "sweep", "scalability", "gradcheck", "inspect"])
def test_help_lists_defaults(command, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert "default" in out or "required" in out
    for action in build_parser()._subparsers._group_actions[0].choices[command]._actions:
        if action.help and action.dest != "help":
            assert "default" in action.help or "required" in action.help, action.dest


def test_eval_artifacts_and_stdout(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["eval", "--config", str(cfg), "--variant", "no_prompt"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("dataset") and "no_prompt" in out
    report = tmp_path / "runs" / "toy_graph_k2_no_prompt" / "report.json"
    doc = json.loads(report.read_text())
    assert doc["config"]["tune"]["variant"] == "no_prompt"
    assert doc["config"]["protocol"] == {**doc["config"]["protocol"], "k": 2, "num_tasks": 2}
    assert len(doc["accuracies"]) == 2


def test_sweep_three_values(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(cfg), "--axis", "delta", "--values", "1,2,3", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["delta=1", "delta=2", "delta=3"]
    snap = json.loads((out / "delta=2" / "report.json").read_text())["config"]
    assert snap["pretrain"]["delta"] == 2 and snap["tune"]["delta"] == 2


def test_ablate_tune_inspect_scalability(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["ablate", "--config", str(cfg), "--variants", "prompt,no_prompt", "--out", str(tmp_path / "ab")]) == 0
    assert sorted(p.name for p in (tmp_path / "ab").iterdir()) == ["no_prompt", "prompt"]
    assert main(["tune", "--config", str(cfg), "--task-id", "1", "--out", str(tmp_path / "h.json")]) == 0
    assert json.loads((tmp_path / "h.json").read_text())["variant"] == "prompt"
    assert main(["inspect", "--config", str(cfg)]) == 0
    assert "prompt 96 96" in capsys.readouterr().out
    assert main(["scalability", "--config", str(cfg), "--buckets", "8,12", "--half-width", "2",
                 "--out", str(tmp_path / "sc")]) == 0
    summary = json.loads((tmp_path / "sc" / "scalability.json").read_text())
    assert len(summary["rows"]) == 2 and summary["slope"] is not None


def test_seed_flag_overrides_config(tmp_path):
    cfg = write_config(tmp_path)
    main(["pretrain", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "s.json")])
    assert json.loads((tmp_path / "s.json").read_text())["run_config"]["seed"] == 4
