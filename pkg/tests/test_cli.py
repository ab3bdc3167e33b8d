import json
import shutil
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from cloudfuse import cli
from cloudfuse import raster_store as rs
from cloudfuse.errors import TrainingAborted
from cloudfuse.harness import load_checkpoint


@pytest.fixture
def data(tmp_path):
    assert cli.main(["synth", "--out-dir", str(tmp_path / "d"), "--count", "2", "--size", "16", "--fraction", "0.4"]) == 0
    return tmp_path / "d"


def first_id(directory):
    return sorted(p.name[: -len("_cloudy.bin")] for p in directory.glob("*_cloudy.bin"))[0]


def test_synth_writes_triplets(data):
    assert len(list(data.glob("*.bin"))) == 6
    assert len(rs.load_dataset(data)) == 2


def test_mask_and_weights(data, tmp_path, capsys):
    pid = first_id(data)
    code = cli.main(["mask", "--in", str(data / f"{pid}_cloudy.bin"), "--out", str(tmp_path / "m.bin"), "--weights", str(tmp_path / "w.bin")])
    assert code == 0
    assert json.loads(capsys.readouterr().out)["cloud_fraction"] == pytest.approx(0.4, abs=0.01)
    kind, mask, _ = rs.read_patch_array(tmp_path / "m.bin")
    assert kind == "mask" and set(np.unique(mask)) <= {0, 1}
    kind, weights, _ = rs.read_patch_array(tmp_path / "w.bin")
    assert kind == "weight"
    np.testing.assert_allclose(weights[0], np.where(mask[0] == 1, 0.8, 0.2), atol=1e-7)


def test_train_eval_predict(data, tmp_path, capsys):
    ckpt = tmp_path / "c.bin"
    assert cli.main(["train", "--data", str(data), "--steps", "2", "--lr", "1e-3", "--out", str(ckpt)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["step"] == 2 and summary["config"]["learning_rate"] == 1e-3

    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--report", str(tmp_path / "r.json")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["aggregate"]["n_patches"] == 2 and report["config"]["steps"] == 2

    pid = first_id(data)
    args = ["predict", "--ckpt", str(ckpt), "--opt", str(data / f"{pid}_cloudy.bin"), "--sar", str(data / f"{pid}_sar.bin")]
    args += ["--out", str(tmp_path / "p.bin"), "--gt", str(data / f"{pid}_clear.bin"), "--grid", str(tmp_path / "g.png")]
    assert cli.main(args) == 0
    pred = rs.load_patch(tmp_path / "p.bin", "optical").bands
    assert pred.shape == (13, 16, 16) and pred.min() >= 0 and pred.max() <= 1
    assert Image.open(tmp_path / "g.png").size == (4 * 16 + 3 * 4, 16)


def test_resume_continues(data, tmp_path):
    assert cli.main(["train", "--data", str(data), "--steps", "1", "--out", str(tmp_path / "a.bin")]) == 0
    assert cli.main(["train", "--data", str(data), "--steps", "3", "--resume", str(tmp_path / "a.bin"), "--out", str(tmp_path / "b.bin")]) == 0
    resumed = load_checkpoint(tmp_path / "b.bin")
    assert resumed.step == 3 and len(resumed.history) == 3


def test_ablate(data, tmp_path):
    code = cli.main(["ablate", "--data", str(data), "--steps", "1", "--report", str(tmp_path / "a.json")])
    assert code == 0
    assert len(json.loads((tmp_path / "a.json").read_text())["rows"]) == 6


@pytest.mark.parametrize(
    "argv",
    [
        ["eval", "--ckpt", "missing.bin", "--data", "."],
        ["train", "--data", "empty", "--out", "c.bin"],
        ["train", "--data", "d", "--steps", "0", "--out", "c.bin"],
    ],
)
def test_validation_exit_code(argv, tmp_path, monkeypatch, data):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "empty").mkdir()
    assert cli.main(argv) == 2


def test_config_mismatch_exit_code(data, tmp_path):
    assert cli.main(["train", "--data", str(data), "--steps", "1", "--out", str(tmp_path / "a.bin")]) == 0
    (tmp_path / "cfg.json").write_text(json.dumps({"channels": 16, "heads": 2, "J": 2, "N": 1, "window": 4}))
    argv = ["train", "--config", str(tmp_path / "cfg.json"), "--data", str(data), "--resume", str(tmp_path / "a.bin"), "--out", str(tmp_path / "b.bin")]
    assert cli.main(argv) == 2


def test_runtime_exit_code(data, tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise TrainingAborted("non-finite loss nan at step 0")

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", "--data", str(data), "--out", str(tmp_path / "c.bin")]) == 3


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        cli.main(["predict"])
    assert info.value.code == 2


@pytest.mark.skipif(shutil.which("cloudfuse") is None, reason="console script not installed")
def test_console_script(tmp_path):
    out = subprocess.run(
        ["cloudfuse", "synth", "--out-dir", str(tmp_path), "--count", "1", "--size", "16"], capture_output=True, text=True
    )
    assert out.returncode == 0, out.stderr
    assert json.loads(out.stdout)["written"]


def test_module_entry(tmp_path):
    out = subprocess.run([sys.executable, "-m", "cloudfuse.cli", "eval", "--ckpt", str(tmp_path / "x"), "--data", "."], capture_output=True, text=True)
    assert out.returncode == 2
