import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from hierseg.cli import code_version, run

NET = ["--widths", "4,4,6,6", "--rep-depth", "6", "--bottleneck", "4"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for preset in ("extended", "signs"):
        assert run(["gen-data", "--hierarchy", "toy", "--preset", preset, "--seed", "3", "--n-images", "4",
                    "--out", str(root / preset)]) == 0
    return root


def _train(ws, out, mode="hier", seed="0"):
    return run(["train", "--hierarchy", "toy", "--data", str(ws / "extended"), str(ws / "signs"),
                "--val", str(ws / "extended"), "--mode", mode, "--seed", seed, "--steps", "4",
                "--eval-every", "2", "--crop", "32,32", "--ratios", "1,1", "--out", str(out)] + NET)


def test_gen_data_writes_manifest(workspace):
    man = json.loads((workspace / "extended" / "manifest.json").read_text())
    assert man["command"] == "gen-data" and man["seed"] == 3
    assert man["code_version"] == code_version()
    assert (workspace / "signs" / "00000.txt").exists()


def test_inspect_hierarchy(capsys, workspace):
    assert run(["inspect-hierarchy", "toy"]) == 0
    out = capsys.readouterr().out
    assert "traffic_sign" in out and "classifier" in out
    assert run(["inspect-hierarchy", "toy", "--data", str(workspace / "signs")]) == 1


def test_train_eval_infer_round(workspace, tmp_path, capsys):
    out = tmp_path / "hier"
    assert _train(workspace, out) == 0
    for name in ("manifest.json", "train.cfg", "metrics.log", "model.ckpt"):
        assert (out / name).exists()
    lines = (out / "metrics.log").read_text().splitlines()
    assert lines[0].startswith("2, train, loss, ")
    assert any(", val, L2/mPA, " in line for line in lines)

    capsys.readouterr()
    assert run(["eval", "--model", str(out / "model.ckpt"), "--data", str(workspace / "extended"),
                "--out", str(tmp_path / "ev")]) == 0
    text = capsys.readouterr().out
    assert "classifier 1 traffic_sign (L2)" in text
    machine = [line for line in text.splitlines() if line.count(", ") == 2]
    assert machine and all(0.0 <= float(line.split(", ")[1]) <= 1.0 for line in machine)

    img = tmp_path / "x.ppm"
    Image.fromarray((np.random.default_rng(0).random((30, 26, 3)) * 255).astype(np.uint8)).save(img)
    assert run(["infer", str(img), "--model", str(out / "model.ckpt"), "--hierarchy", "toy", "--finest",
                "--out", str(tmp_path / "seg")]) == 0
    for name in ("x_finest.ppm", "x_L1.ppm", "x_L2.ppm"):
        assert Image.open(tmp_path / "seg" / name).size == (26, 30)
    assert run(["infer", str(img), "--model", str(out / "model.ckpt"), "--level", "3",
                "--out", str(tmp_path / "seg")]) == 2
    assert run(["infer", str(img), "--model", str(out / "model.ckpt"), "--hierarchy", "street",
                "--out", str(tmp_path / "seg")]) == 2


def test_flat_and_hier_logs(workspace, tmp_path):
    assert _train(workspace, tmp_path / "f", mode="flat") == 0
    assert _train(workspace, tmp_path / "h", mode="hier") == 0
    flat = (tmp_path / "f" / "metrics.log").read_text()
    hier = (tmp_path / "h" / "metrics.log").read_text()
    assert flat != hier and "L2/mPA" in flat and "L2/mPA" in hier


def test_train_logs_reproducible(workspace, tmp_path):
    assert _train(workspace, tmp_path / "a") == 0
    assert _train(workspace, tmp_path / "b") == 0
    assert (tmp_path / "a" / "metrics.log").read_bytes() == (tmp_path / "b" / "metrics.log").read_bytes()


def test_config_file_overridden_by_flags(workspace, tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("steps = 100\nlearning_rate = 0.02\n")
    assert run(["train", "--hierarchy", "toy", "--data", str(workspace / "extended"), "--seed", "1",
                "--config", str(cfg), "--steps", "2", "--crop", "32,32", "--out", str(tmp_path / "o")] + NET) == 0
    text = (tmp_path / "o" / "train.cfg").read_text()
    assert "steps = 2\n" in text and "learning_rate = 0.02\n" in text


def test_describe(capsys):
    assert run(["describe", "--hierarchy", "toy"] + NET) == 0
    out = capsys.readouterr().out
    assert out.count("\nhead ") == 2


def test_experiment_quick(tmp_path, capsys):
    assert run(["experiment", "ab-compare", "--seeds", "1", "--quick", "--out", str(tmp_path / "e")]) == 0
    out = capsys.readouterr().out
    assert "flat" in out and "hier" in out and "L2/mPA" in out
    assert (tmp_path / "e" / "manifest.json").exists()


@pytest.mark.parametrize("argv", [
    ["frobnicate"],
    ["train", "--data", "x", "--out", "y"],
    ["gen-data", "--preset", "nope", "--seed", "1", "--out", "z", "--hierarchy", "toy"],
    ["inspect-hierarchy", "/no/such/file.hier"],
    [],
])
def test_usage_errors_exit_two(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == 2


def test_runtime_error_exit_one(tmp_path):
    bad = tmp_path / "bad.hier"
    bad.write_text("root\n  a\n  a\n")
    assert run(["inspect-hierarchy", str(bad)]) == 1


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "hierseg", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("gen-data", "inspect-hierarchy", "train", "eval", "infer", "experiment"):
        assert cmd in proc.stdout
