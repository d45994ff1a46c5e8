import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from irstd.cli import main
from irstd.config import parse_flat


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    assert main(["synth", "--out", str(root), "--count", "4", "--size", "32", "--seed", "1"]) == 0
    return root


def test_synth_layout(dataset):
    assert len(list((dataset / "images").glob("*.png"))) == 4
    assert len((dataset / "train.txt").read_text().split()) == 4
    assert not (dataset / "INCOMPLETE").exists()


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--data", "/nonexistent", "--out", str(tmp_path / "a")]) == 2
    assert "data root not found: /nonexistent" in capsys.readouterr().err
    assert main(["train", "--set", "no.such=1", "--out", str(tmp_path / "b")]) == 2
    assert main(["train", "--set", "train.steps=abc", "--out", str(tmp_path / "c")]) == 2
    assert main(["eval", "--out", str(tmp_path / "d")]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.txt")]) == 2


def test_runtime_failure_exit_1_keeps_marker(tmp_path, dataset, capsys):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"garbage")
    out = tmp_path / "p"
    assert main(["predict", "--checkpoint", str(bad), "--input", str(dataset), "--out", str(out)]) == 1
    assert (out / "INCOMPLETE").exists() and (out / "config.txt").exists()


def test_output_root_env(tmp_path, dataset, monkeypatch):
    monkeypatch.setenv("IRSTD_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["eval", "--pred", str(dataset / "masks"), "--gt", str(dataset / "masks")]) == 0
    assert (tmp_path / "root" / "eval" / "report.json").exists()


def test_config_file_and_flag_precedence(tmp_path, dataset):
    cfg = tmp_path / "c.txt"
    cfg.write_text("distill.steps=3\ndistill.batch=2\ndistill.lr=0.01\n")
    out = tmp_path / "d"
    rc = main(["distill", "--data", str(dataset), "--config", str(cfg), "--set", "distill.steps=1",
               "--lr", "0.002", "--out", str(out)])
    assert rc == 0
    stamp = parse_flat((out / "config.txt").read_text())
    assert stamp["distill.steps"] == 1 and stamp["distill.lr"] == 0.002 and stamp["distill.batch"] == 2
    assert "# irstd " in (out / "config.txt").read_text()
    assert len((out / "distill.log").read_text().splitlines()) == 1


def test_pipeline_predict_and_eval(tmp_path, dataset, capsys):
    d, t, p, e = (tmp_path / k for k in "dtpe")
    assert main(["distill", "--data", str(dataset), "--steps", "1", "--batch", "2", "--out", str(d)]) == 0
    assert main(["train", "--data", str(dataset), "--steps", "1", "--batch", "2", "--init", str(d / "final.npz"),
                 "--eval-every", "1", "--out", str(t)]) == 0
    assert "train_iou=" in capsys.readouterr().out
    assert main(["predict", "--checkpoint", str(t / "final.npz"), "--input", str(dataset), "--dump-heatmaps",
                 "--out", str(p)]) == 0
    masks = sorted((p / "masks").glob("*.png"))
    assert len(masks) == 4
    assert set(np.unique(np.asarray(Image.open(masks[0])))) <= {0, 255}
    assert len(list((p / "heatmaps").glob("*_P1_before.png"))) == 4
    assert main(["eval", "--pred", str(p / "masks"), "--gt", str(dataset / "masks"), "--csv", "--out", str(e)]) == 0
    doc = json.loads((e / "report.json").read_text())
    assert doc["p_all"] == 4 * 32 * 32
    assert len((e / "per_image.csv").read_text().splitlines()) == 5


def test_predict_pads_odd_sizes(tmp_path, dataset):
    t = tmp_path / "t"
    assert main(["train", "--data", str(dataset), "--steps", "1", "--batch", "2", "--out", str(t)]) == 0
    (tmp_path / "odd").mkdir()
    Image.fromarray((np.random.default_rng(0).random((37, 45)) * 255).astype(np.uint8)).save(tmp_path / "odd" / "x.png")
    out = tmp_path / "p"
    assert main(["predict", "--checkpoint", str(t / "final.npz"), "--input", str(tmp_path / "odd"), "--out", str(out)]) == 0
    assert np.asarray(Image.open(out / "masks" / "x.png")).shape == (37, 45)


def test_eval_perfect_prints_100(tmp_path, dataset, capsys):
    assert main(["eval", "--pred", str(dataset / "masks"), "--gt", str(dataset / "masks"), "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    row = [l for l in text.splitlines() if l.startswith(dataset.name)][0].split()
    assert row[1:] == ["100", "100", "0"]


def test_profile_output(tmp_path, capsys):
    assert main(["profile", "--b", "1", "--n", "4", "--d", "64", "--h", "8", "--w", "8", "--out", str(tmp_path)]) == 0
    out = dict(line.split("=", 1) for line in capsys.readouterr().out.split())
    n, d, hw = 4, 64, 64
    assert int(out["formula_total"]) == 34 * n * d * d + 8 * hw * d * d + 8 * n * hw * d + 4 * n * n * d
    assert out["match"] == "true" and out["measured_total"] == out["formula_total"]


def test_reruns_are_bitwise_identical(tmp_path, dataset):
    for run in ("a", "b"):
        assert main(["train", "--data", str(dataset), "--steps", "2", "--batch", "2", "--seed", "3",
                     "--out", str(tmp_path / run)]) == 0
    assert (tmp_path / "a" / "train.log").read_text() == (tmp_path / "b" / "train.log").read_text()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "irstd", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("irstd ")
