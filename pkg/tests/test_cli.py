import csv

import numpy as np
import pytest
from PIL import Image

from litnet.checkpoint import Checkpoint, save_checkpoint
from litnet.cli import main, pad_to_multiple
from litnet.data import save_image
from litnet.model import LitNet, ModelConfig

TOY = dict(base_width=2, fc_width=4, branch_divisor=4)


def write_model(path, rng, **cfg):
    model = LitNet(ModelConfig(**TOY, **cfg), seed=0)
    for p in model.parameters():
        p.data = (0.3 * rng.standard_normal(p.shape)).astype(p.dtype)
    save_checkpoint(path, Checkpoint.from_model(model))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def png(path, rng, h, w):
    save_image(rng.random((h, w, 3)), path)
    return path


def test_pad_to_multiple_reflects():
    x = np.arange(10.0).reshape(1, 1, 2, 5)
    padded, h, w = pad_to_multiple(x)
    assert padded.shape == (1, 1, 8, 8) and (h, w) == (2, 5)
    np.testing.assert_array_equal(padded[0, 0, :2, :5], x[0, 0])
    np.testing.assert_array_equal(padded[0, 0, 0, 5:8], [3.0, 2.0, 1.0])


@pytest.mark.parametrize("h, w", [(16, 24), (13, 21), (1, 7), (9, 8)])
def test_enhance_preserves_dims(tmp_path, rng, capsys, h, w):
    ckpt = write_model(tmp_path / "e.litn", rng)
    src = png(tmp_path / "x.png", rng, h, w)
    code, _, err = run(capsys, "enhance", "--ckpt", ckpt, "--in", src, "--out", tmp_path / "y.png")
    assert code == 0, err
    out = Image.open(tmp_path / "y.png")
    assert out.mode == "RGB" and out.size == (w, h)


@pytest.mark.parametrize("s", [2, 3, 4])
def test_superres_scales_dims(tmp_path, rng, capsys, s):
    ckpt = write_model(tmp_path / "s.litn", rng, mode="superres", scale=s)
    src = png(tmp_path / "x.png", rng, 48, 64)
    code, _, err = run(capsys, "superres", "--ckpt", ckpt, "--scale", s, "--in", src, "--out", tmp_path / "y.png")
    assert code == 0, err
    assert Image.open(tmp_path / "y.png").size == (64 * s, 48 * s)


def test_superres_scale_mismatch(tmp_path, rng, capsys):
    ckpt = write_model(tmp_path / "s.litn", rng, mode="superres", scale=2)
    src = png(tmp_path / "x.png", rng, 8, 8)
    code, _, err = run(capsys, "superres", "--ckpt", ckpt, "--scale", 4, "--in", src, "--out", tmp_path / "y.png")
    assert code == 1 and "x2" in err
    assert not (tmp_path / "y.png").exists()


def test_enhance_rejects_superres_checkpoint(tmp_path, rng, capsys):
    ckpt = write_model(tmp_path / "s.litn", rng, mode="superres", scale=2)
    src = png(tmp_path / "x.png", rng, 8, 8)
    code, _, err = run(capsys, "enhance", "--ckpt", ckpt, "--in", src, "--out", tmp_path / "y.png")
    assert code == 1 and err.count("\n") == 1 and err.startswith("litnet: error: ConfigError:")


def test_evaluate_identical_dirs(tmp_path, rng, capsys):
    (tmp_path / "d").mkdir()
    for i in range(3):
        png(tmp_path / "d" / f"im{i}.png", rng, 24, 24)
    code, out, err = run(capsys, "evaluate", "--pred", tmp_path / "d", "--gt", tmp_path / "d", "--out", tmp_path / "r.csv")
    assert code == 0, err
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    per_image = [r for r in rows if not r["image"].startswith("AGGREGATE")]
    assert len(per_image) == 3
    assert all(float(r["ssim"]) == 1.0 and float(r["psnr"]) == 100.0 for r in per_image)


def test_evaluate_without_gt(tmp_path, rng, capsys):
    (tmp_path / "d").mkdir()
    png(tmp_path / "d" / "a.png", rng, 24, 24)
    code, _, _ = run(capsys, "evaluate", "--pred", tmp_path / "d", "--out", tmp_path / "r.csv")
    assert code == 0
    row = next(csv.DictReader(open(tmp_path / "r.csv")))
    assert row["psnr"] == "" and row["uiqm"] != ""


def test_count_params(capsys):
    code, out, _ = run(capsys, "count-params")
    assert code == 0
    lines = dict(line.split("\t") for line in out.strip().splitlines())
    assert lines["params"] == "432654"
    assert 10e9 <= int(lines["flops@256x256"]) <= 25e9


def test_count_params_from_config(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[model]\nbase_width = 2\nfc_width = 4\nbranch_divisor = 4\n")
    code, out, _ = run(capsys, "count-params", "--config", cfg, "--size", 16, 16)
    assert code == 0 and out.splitlines()[0] == "params\t73101"


def test_train_and_enhance_round_trip(tmp_path, rng, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[train]\nn_synthetic = 2\nsynth_size = 16\nbatch_size = 2\nmax_steps = 2\n[model]\nbase_width = 2\nfc_width = 4\nbranch_divisor = 4\n")
    code, out, err = run(capsys, "train", "--config", cfg, "--out", tmp_path / "run", "--seed", 1, "--deterministic")
    assert code == 0, err
    assert (tmp_path / "run" / "final.litn").exists()
    assert len((tmp_path / "run" / "train.log").read_text().splitlines()) == 3
    src = png(tmp_path / "x.png", rng, 10, 12)
    code, _, err = run(capsys, "enhance", "--ckpt", tmp_path / "run" / "final.litn", "--in", src, "--out", tmp_path / "y.png")
    assert code == 0, err


def test_make_synth_procedural(tmp_path, capsys):
    code, out, _ = run(capsys, "make-synth", "--out", tmp_path / "s", "--count", 3, "--size", 16)
    assert code == 0
    ins = sorted(p.name for p in (tmp_path / "s" / "input").iterdir())
    assert ins == sorted(p.name for p in (tmp_path / "s" / "target").iterdir()) and len(ins) == 3


def test_make_synth_from_clean_dir_with_scale(tmp_path, rng, capsys):
    (tmp_path / "clean").mkdir()
    png(tmp_path / "clean" / "reef.png", rng, 33, 40)
    code, _, err = run(capsys, "make-synth", "--clean", tmp_path / "clean", "--out", tmp_path / "s", "--seed", 2, "--scale", 4)
    assert code == 0, err
    assert Image.open(tmp_path / "s" / "input" / "reef.png").size == (10, 8)
    assert Image.open(tmp_path / "s" / "target" / "reef.png").size == (40, 32)


@pytest.mark.parametrize("argv", [
    ["bogus"],
    ["enhance", "--ckpt", "missing.litn", "--in", "missing.png", "--out", "o.png"],
    ["superres", "--ckpt", "c", "--scale", "5", "--in", "a", "--out", "b"],
    ["evaluate", "--pred", "nowhere", "--out", "r.csv"],
    ["count-params", "--config", "nowhere.ini"],
    ["make-synth", "--clean", "nowhere", "--out", "x"],
])
def test_errors_exit_one_with_single_line(tmp_path, capsys, monkeypatch, argv):
    monkeypatch.chdir(tmp_path)
    code, out, err = run(capsys, *argv)
    assert code == 1
    assert err.startswith("litnet: error: ") and err.count("\n") == 1
    assert not (tmp_path / "o.png").exists() and not (tmp_path / "r.csv").exists()
