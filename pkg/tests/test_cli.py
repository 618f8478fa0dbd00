"""CLI surface: every subcommand end to end on tiny configurations."""

import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from seedlab.cli import main

TINY_RUN = """
mapping = "usage"
epochs = 1
batch_size = 8
seed = 0

[backbone]
kind = "conv"
feature_dim = 8
depth = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.toml"
    config.write_text(TINY_RUN)
    data_dir = root / "data"
    rc = main([
        "gen-data", "--out", str(data_dir), "--seed", "3",
        "--train-count", "24", "--eval-count", "8", "--png", "2",
    ])
    assert rc == 0
    return root


def test_gen_data_layout_and_idempotence(workspace, capsys):
    data_dir = workspace / "data"
    for split in ("train", "eval"):
        assert (data_dir / split / "samples.bin").exists()
        assert (data_dir / split / "manifest.json").exists()
    assert (data_dir / "manifest.json").exists()
    assert list((data_dir / "preview").glob("*.png"))
    before = (data_dir / "train" / "samples.bin").read_bytes()
    rc = main([
        "gen-data", "--out", str(data_dir), "--seed", "3",
        "--train-count", "24", "--eval-count", "8",
    ])
    assert rc == 0
    assert (data_dir / "train" / "samples.bin").read_bytes() == before


def test_gradcheck_quick_exits_zero(capsys):
    rc = main(["gradcheck", "--quick"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "PASS" in out
    assert "backbone_transformer" in out


def test_train_eval_render_pipeline(workspace, capsys):
    root = workspace
    run_dir = root / "run"
    rc = main([
        "train", "--config", str(root / "run.toml"),
        "--data", str(root / "data" / "train"),
        "--eval-data", str(root / "data" / "eval"),
        "--out", str(run_dir),
    ])
    assert rc == 0
    assert (run_dir / "run.json").exists()
    assert (run_dir / "manifest.json").exists()
    payload = json.loads((run_dir / "run.json").read_text())
    assert payload["config"]["mapping"] == "usage"
    assert payload["config"]["tau1"] == 50.0  # conv default temperature

    eval_dir = root / "evalrun"
    rc = main([
        "eval", "--checkpoint", str(run_dir / "checkpoint_student.bin"),
        "--config", str(run_dir / "manifest.json"),
        "--data", str(root / "data" / "eval"),
        "--out", str(eval_dir),
    ])
    assert rc == 0
    metrics = json.loads((eval_dir / "metrics.json").read_text())
    assert set(metrics) == {"per_class", "miou", "mean_fpr", "mean_fnr", "counts", "mode", "flags"}
    assert (eval_dir / "metrics.csv").read_text().count("\n") == 2

    render_dir = root / "panels"
    rc = main([
        "render", "--checkpoint", str(run_dir / "checkpoint_student.bin"),
        "--config", str(run_dir / "manifest.json"),
        "--data", str(root / "data" / "eval"),
        "--out", str(render_dir), "--samples", "0,1",
    ])
    assert rc == 0
    assert len(list(render_dir.glob("panel*.png"))) == 2


def test_eval_metrics_match_train_report(workspace):
    run_dir = workspace / "run"
    eval_dir = workspace / "evalrun"
    trained = json.loads((run_dir / "run.json").read_text())["metrics"]
    rescored = json.loads((eval_dir / "metrics.json").read_text())
    assert trained == rescored


def test_compare_produces_tables(workspace, capsys):
    out_dir = workspace / "cmp"
    rc = main([
        "compare", "--variants", "cam,mil", "--backbones", "conv",
        "--seeds", "1", "--config", str(workspace / "run.toml"),
        "--data", str(workspace / "data" / "train"),
        "--eval-data", str(workspace / "data" / "eval"),
        "--out", str(out_dir),
    ])
    assert rc == 0
    csv = (out_dir / "comparison.csv").read_text().strip().splitlines()
    assert csv[0].startswith("name,miou_mean")
    assert len(csv) == 3  # header + two variants
    assert (out_dir / "comparison.txt").read_text().count("pairwise") == 1
    assert (out_dir / "detail.json").exists()


def test_unknown_config_key_exits_2(workspace, capsys):
    bad = workspace / "bad.toml"
    bad.write_text(TINY_RUN + "\nlerning_rate = 3\n")
    rc = main([
        "train", "--config", str(bad),
        "--data", str(workspace / "data" / "train"),
        "--out", str(workspace / "never"),
    ])
    err = capsys.readouterr().err
    assert rc == 2
    assert "lerning_rate" in err


def test_unknown_section_key_exits_2(workspace, capsys):
    bad = workspace / "bad2.toml"
    bad.write_text(TINY_RUN + "\n[optimizer]\nlr = 1\n")
    rc = main([
        "train", "--config", str(bad),
        "--data", str(workspace / "data" / "train"),
        "--out", str(workspace / "never2"),
    ])
    err = capsys.readouterr().err
    assert rc == 2
    assert "optimizer.lr" in err.replace("'", "")


def test_overrides_win_over_file(workspace):
    out = workspace / "ovr"
    rc = main([
        "train", "--config", str(workspace / "run.toml"),
        "--data", str(workspace / "data" / "train"),
        "--out", str(out),
        "mapping=cam_gap", "optimizer.learning_rate=0.001", "regularization_enabled=false",
    ])
    assert rc == 0
    payload = json.loads((out / "run.json").read_text())
    assert payload["config"]["mapping"] == "cam_gap"
    assert payload["config"]["optimizer"]["learning_rate"] == 0.001


def test_missing_config_file_exits_2(workspace, capsys):
    rc = main([
        "train", "--config", str(workspace / "absent.toml"),
        "--data", str(workspace / "data" / "train"),
        "--out", str(workspace / "never3"),
    ])
    assert rc == 2


def test_deterministic_env_runs_are_byte_identical(workspace):
    env = dict(os.environ, USAGE_DETERMINISTIC="1")
    outs = []
    for name in ("d1", "d2"):
        out = workspace / name
        cmd = [
            sys.executable, "-m", "seedlab.cli",
            "train", "--config", str(workspace / "run.toml"),
            "--data", str(workspace / "data" / "train"),
            "--eval-data", str(workspace / "data" / "eval"),
            "--out", str(out),
        ]
        proc = subprocess.run(cmd, env=env, capture_output=True, text=True, cwd="/root/pkg")
        assert proc.returncode == 0, proc.stderr
        outs.append((out / "metrics.json").read_bytes())
    assert outs[0] == outs[1]
