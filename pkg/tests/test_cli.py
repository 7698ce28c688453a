"""Command-line driver tests: config plumbing, artifact checks, replay."""

import json
import os

import pytest

from hierdex.cli import main
from hierdex.config import config_hash, default_config, load_config


@pytest.fixture(scope="module")
def tiny_cfg_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(
        json.dumps({"workers": 1, "data": {"per_category": 2, "steps": 60}})
    )
    return str(path)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory, tiny_cfg_path):
    out = str(tmp_path_factory.mktemp("artifacts"))
    rc = main(["gen-data", "--config", tiny_cfg_path, "--out", out])
    assert rc == 0
    return out


def test_print_config_defaults(capsys):
    from hierdex.config import dump_config

    assert main(["print-config"]) == 0
    out = capsys.readouterr().out
    assert out == dump_config(default_config())
    doc = json.loads(out)
    assert doc["ppo"]["gamma"] == 0.99
    assert doc["suite"]["seeds"] == 10


def test_print_config_seed_override(capsys, tiny_cfg_path):
    assert main(["print-config", "--config", tiny_cfg_path, "--seed", "9"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["seed"] == 9
    assert doc["data"]["per_category"] == 2


def test_print_config_rejects_unknown_keys(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"ppo": {"warmup": 10}}))
    assert main(["print-config", "--config", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "unknown config keys at $.ppo" in err
    assert "warmup" in err


def test_gen_data_writes_artifacts(data_dir, tiny_cfg_path, capsys):
    assert os.path.exists(os.path.join(data_dir, "demos.jsonl"))
    assert os.path.exists(os.path.join(data_dir, "splits.json"))
    with open(os.path.join(data_dir, "demos.jsonl.stamp.json")) as fh:
        stamp = json.load(fh)
    assert stamp["config_hash"] == config_hash(load_config(tiny_cfg_path))
    with open(os.path.join(data_dir, "demos.jsonl")) as fh:
        assert len(fh.read().strip().splitlines()) == 10  # 5 categories x 2


def test_gen_data_deterministic(tmp_path, tiny_cfg_path, data_dir):
    out2 = str(tmp_path / "again")
    assert main(["gen-data", "--config", tiny_cfg_path, "--out", out2]) == 0
    with open(os.path.join(data_dir, "demos.jsonl"), "rb") as fh:
        first = fh.read()
    with open(os.path.join(out2, "demos.jsonl"), "rb") as fh:
        second = fh.read()
    assert first == second


def test_gen_data_seed_changes_output(tmp_path, tiny_cfg_path, data_dir):
    out2 = str(tmp_path / "seeded")
    rc = main(["gen-data", "--config", tiny_cfg_path, "--seed", "99", "--out", out2])
    assert rc == 0
    with open(os.path.join(data_dir, "demos.jsonl"), "rb") as fh:
        first = fh.read()
    with open(os.path.join(out2, "demos.jsonl"), "rb") as fh:
        second = fh.read()
    assert first != second


def test_replay_prints_completion(data_dir, tiny_cfg_path, capsys):
    rc = main(["replay", "--config", tiny_cfg_path, "--out", data_dir, "--index", "0"])
    assert rc == 0
    assert "completion 1.000" in capsys.readouterr().out


def test_replay_index_out_of_range(data_dir, tiny_cfg_path, capsys):
    rc = main(["replay", "--config", tiny_cfg_path, "--out", data_dir, "--index", "99"])
    assert rc == 1
    assert "out of range" in capsys.readouterr().err


def test_missing_dataset_is_reported(tmp_path, capsys):
    out = str(tmp_path / "empty")
    rc = main(["train-planner", "--out", out])
    assert rc == 1
    err = capsys.readouterr().err
    assert "missing artifact: demo dataset" in err
    assert os.path.join(out, "demos.jsonl") in err


def test_missing_planner_is_reported(data_dir, tiny_cfg_path, tmp_path, capsys):
    rc = main(
        [
            "train-controller", "--config", tiny_cfg_path,
            "--dataset", os.path.join(data_dir, "demos.jsonl"),
            "--out", str(tmp_path / "ctrl"),
        ]
    )
    assert rc == 1
    assert "missing artifact: planner checkpoint" in capsys.readouterr().err


def test_eval_rejects_unknown_method(data_dir, tiny_cfg_path, capsys):
    rc = main(
        [
            "eval", "--config", tiny_cfg_path, "--out", data_dir,
            "--methods", "zero_shot",
        ]
    )
    assert rc == 1
    assert "unknown method: zero_shot" in capsys.readouterr().err


def test_eval_reports_missing_controller(data_dir, tiny_cfg_path, capsys):
    rc = main(
        [
            "eval", "--config", tiny_cfg_path, "--out", data_dir,
            "--methods", "vanilla_rl",
        ]
    )
    assert rc == 1
    assert "missing artifact: vanilla_rl controller" in capsys.readouterr().err


def test_fuse_demo_writes_report(tmp_path, tiny_cfg_path, capsys):
    out = str(tmp_path / "fusion")
    rc = main(["fuse-demo", "--config", tiny_cfg_path, "--out", out])
    assert rc == 0
    assert "fused over" in capsys.readouterr().out
    path = os.path.join(out, "fusion.csv")
    assert os.path.exists(path)
    assert os.path.exists(path + ".stamp.json")
    with open(path) as fh:
        header = fh.readline().strip()
    assert header == "step,te_cm,oe_rad,kept,rejected"


def test_fuse_demo_deterministic(tmp_path, tiny_cfg_path):
    outs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert main(["fuse-demo", "--config", tiny_cfg_path, "--out", out]) == 0
        with open(os.path.join(out, "fusion.csv"), "rb") as fh:
            outs.append(fh.read())
    assert outs[0] == outs[1]
