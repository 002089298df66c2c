"""Acceptance criteria 1-10.  Each test prints one ``criterion N PASS|FAIL`` line.

The overfit run (criterion 4) takes several minutes; everything else is quick.
"""

import csv
import math
import subprocess
import sys
import time
import warnings

import numpy as np
import pytest
from PIL import Image

from litnet import metrics
from litnet.checkpoint import Checkpoint, save_checkpoint
from litnet.cli import main as cli_main
from litnet.core import ops
from litnet.core.tensor import Tensor
from litnet.data import save_image, synthetic_pairs
from litnet.gradsuite import run_suite
from litnet.losses import LossConfig, cl1_loss
from litnet.model import LitNet, ModelConfig, count_flops, count_params
from litnet.train import TrainConfig, dataset_psnr, train

from oracles import ref_ms_ssim, ref_ssim_terms, ref_uicm, ref_uiconm, ref_uism

DEFAULT_PARAMS = 432_654


def test_c01_gradient_suite(acceptance):
    t0 = time.perf_counter()
    outcomes = run_suite()
    elapsed = time.perf_counter() - t0
    failed = [o.name for o in outcomes if not o.passed]
    prim = max(o.result.max_rel_error for o in outcomes if not o.name.startswith("LitNet"))
    model = max(o.result.max_rel_error for o in outcomes if o.name.startswith("LitNet"))
    ok = not failed and prim < 1e-4 and model < 1e-3 and elapsed < 120
    acceptance(1, "gradient suite", ok,
               f"{len(outcomes)} checks, worst primitive/block {prim:.2e} (<1e-4), worst model {model:.2e} (<1e-3), "
               f"{elapsed:.0f}s (<120s), failed={failed}")


def test_c02_zero_residual_identity(acceptance, rng):
    bad = []
    for mode, scale in [("enhance", None), ("superres", 2), ("superres", 3), ("superres", 4)]:
        model = LitNet(ModelConfig(mode=mode, scale=scale), seed=3)
        for p in model.parameters():
            p.data = rng.standard_normal(p.shape).astype(p.dtype)
        for p in model.head.parameters():
            p.data[...] = 0
        for training in (True, False):
            model.train(training)
            for _ in range(10):
                x = rng.random((1, 3, 16, 24)).astype(np.float32)
                out = model(Tensor(x)).data
                ref = x if scale is None else ops.bicubic_upsample(Tensor(x), scale).data
                if out.shape != ref.shape or out.tobytes() != ref.tobytes():
                    bad.append((mode, scale, training))
    acceptance(2, "zero-residual identity", not bad,
               f"enhance == input, superres == bicubic(input) bit-exact, 10 inputs x s in (2,3,4) x train/eval; mismatches={bad}")


def test_c03_shuffle_invertibility(acceptance, rng):
    failures = 0
    for r in (2, 3, 4):
        for _ in range(50):
            c = int(rng.integers(1, 4))
            h, w = (int(v) * r for v in rng.integers(1, 6, 2))
            x = rng.standard_normal((2, c, h, w)).astype(np.float32)
            down = ops.pixel_unshuffle(Tensor(x), r)
            back = ops.pixel_shuffle(down, r).data
            y = rng.standard_normal((2, c * r * r, h // r, w // r)).astype(np.float32)
            again = ops.pixel_unshuffle(ops.pixel_shuffle(Tensor(y), r), r).data
            failures += back.tobytes() != x.tobytes() or again.tobytes() != y.tobytes()
    acceptance(3, "pixel shuffle invertibility", failures == 0, f"150 random tensors, r in (2,3,4), both directions; failures={failures}")


@pytest.mark.slow
def test_c04_overfit_capacity(acceptance):
    cfg = TrainConfig(deterministic=True)  # lr 2e-4, batch 5, 500 steps, 8 synthetic 64x64 pairs
    loss_cfg = LossConfig()
    assert (cfg.lr, cfg.batch_size, cfg.max_steps, cfg.n_synthetic, cfg.synth_size) == (2e-4, 5, 500, 8, 64)
    data = synthetic_pairs(cfg.n_synthetic, cfg.seed, cfg.synth_size, cfg.synth_size)
    baseline = float(np.mean([metrics.psnr(np.clip(x, 0, 1), y) for x, y in zip(*data)]))
    t0 = time.perf_counter()
    result = train(cfg, ModelConfig(), loss_cfg, data=data)
    elapsed = time.perf_counter() - t0
    score = dataset_psnr(result.model, *data)
    ok = score >= 30.0 and elapsed < 900
    acceptance(4, "overfit capacity", ok,
               f"training-set PSNR {score:.2f} dB (need >= 30; identity baseline {baseline:.2f} dB), "
               f"final l_T {result.losses[-1]['l_T']:.4f}, {elapsed / 60:.1f} min (<15)")


def test_c05_loss_constants(acceptance, rng):
    cfg = LossConfig()
    consts = (cfg.w_r, cfg.w_g, cfg.w_b) == (1.0, 1.5, 2.0) and (cfg.lambda_l1, cfg.lambda_p, cfg.lambda_s) == (1.0, 0.02, 0.5)
    target = rng.random((2, 3, 8, 8))
    green = target.copy()
    green[:, 1] += 0.1
    v_green = cl1_loss(Tensor(green), target, cfg).item()
    v_all = cl1_loss(Tensor(target + 0.1), target, cfg).item()
    ok = consts and abs(v_green - 0.15) <= 1e-9 and abs(v_all - 0.45) <= 1e-9
    acceptance(5, "loss constants", ok,
               f"w=({cfg.w_r},{cfg.w_g},{cfg.w_b}) lambda=({cfg.lambda_l1},{cfg.lambda_p},{cfg.lambda_s}); "
               f"cl1 green+0.1={v_green:.12f} all+0.1={v_all:.12f}")


def test_c06_metric_oracles(acceptance):
    worst = {"psnr_db": 0.0, "ssim": 0.0, "ms_ssim": 0.0, "uiqm_parts": 0.0}
    for seed in range(5):
        r = np.random.default_rng(seed)
        a = r.random((176, 192, 3))
        b = np.clip(a + 0.1 * r.standard_normal(a.shape), 0, 1)
        ref_mse = math.fsum(((a - b) ** 2).ravel().tolist()) / a.size
        worst["psnr_db"] = max(worst["psnr_db"], abs(metrics.psnr(a, b) - 10 * math.log10(1.0 / ref_mse)))
        worst["ssim"] = max(worst["ssim"], abs(metrics.ssim_index(a, b) - ref_ssim_terms(a, b)[0].mean()))
        worst["ms_ssim"] = max(worst["ms_ssim"], abs(metrics.ms_ssim(a, b) - ref_ms_ssim(a, b, metrics.MS_SSIM_WEIGHTS)))
        q, cm, sm, con = metrics.uiqm(b)
        refs = (ref_uicm(b), ref_uism(b), ref_uiconm(b))
        errs = [abs(x - y) for x, y in zip((cm, sm, con), refs)]
        errs.append(abs(q - (0.0282 * refs[0] + 0.2953 * refs[1] + 3.5753 * refs[2])))
        worst["uiqm_parts"] = max(worst["uiqm_parts"], *errs)
    ok = worst["psnr_db"] < 0.01 and worst["ssim"] < 1e-6 and worst["ms_ssim"] < 1e-6 and worst["uiqm_parts"] < 1e-9
    acceptance(6, "metric oracles", ok, "5 seeded 176x192 pairs, worst abs diff " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))


def test_c07_lightweight_structure(acceptance, capsys):
    cfg = ModelConfig()
    params = count_params(cfg)
    flops = count_flops(cfg, 256, 256)
    code = cli_main(["count-params"])
    out = capsys.readouterr().out
    ok = code == 0 and f"params\t{params}" in out and 0.3e6 <= params <= 1.0e6 and 10e9 <= flops <= 25e9 and params == DEFAULT_PARAMS
    acceptance(7, "lightweight structure", ok,
               f"params {params} (in [0.3M, 1.0M], golden {DEFAULT_PARAMS}), FLOPs@256x256 {flops / 1e9:.2f}G (in [10G, 25G])")


def test_c08_shape_cli_contract(acceptance, tmp_path, rng, capsys):
    problems = []
    toy = dict(base_width=4, fc_width=8)
    for s in (2, 3, 4):
        ck = tmp_path / f"sr{s}.litn"
        save_checkpoint(ck, Checkpoint.from_model(LitNet(ModelConfig(**toy, mode="superres", scale=s))))
        for h, w in [(48, 64), (13, 21)]:
            save_image(rng.random((h, w, 3)), tmp_path / "in.png")
            code = cli_main(["superres", "--ckpt", str(ck), "--scale", str(s), "--in", str(tmp_path / "in.png"), "--out", str(tmp_path / "o.png")])
            if code or Image.open(tmp_path / "o.png").size != (w * s, h * s):
                problems.append(f"superres x{s} {h}x{w}")
    ck = tmp_path / "enh.litn"
    save_checkpoint(ck, Checkpoint.from_model(LitNet(ModelConfig(**toy))))
    for h, w in [(64, 48), (13, 21), (1, 1), (9, 100)]:
        save_image(rng.random((h, w, 3)), tmp_path / "in.png")
        code = cli_main(["enhance", "--ckpt", str(ck), "--in", str(tmp_path / "in.png"), "--out", str(tmp_path / "o.png")])
        img = Image.open(tmp_path / "o.png")
        if code or img.size != (w, h) or img.mode != "RGB":
            problems.append(f"enhance {h}x{w}")
    d = tmp_path / "same"
    d.mkdir()
    for i in range(3):
        save_image(rng.random((32, 40, 3)), d / f"im{i}.png")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        code = cli_main(["evaluate", "--pred", str(d), "--gt", str(d), "--out", str(tmp_path / "r.csv")])
    rows = [r for r in csv.DictReader(open(tmp_path / "r.csv")) if not r["image"].startswith("AGGREGATE")]
    if code or len(rows) != 3 or any(float(r["ssim"]) != 1.0 or float(r["psnr"]) != metrics.PSNR_CAP for r in rows):
        problems.append("evaluate identical dirs")
    capsys.readouterr()
    acceptance(8, "shape/CLI contract", not problems,
               f"superres s x dims for s in (2,3,4), enhance keeps odd dims, evaluate identical -> SSIM 1 / PSNR cap; problems={problems}")


def test_c09_determinism(acceptance, tmp_path):
    cfg = tmp_path / "det.ini"
    cfg.write_text("[train]\nn_synthetic = 6\nsynth_size = 32\nmax_steps = 8\n")
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        proc = subprocess.run(
            [sys.executable, "-m", "litnet", "train", "--config", str(cfg), "--out", str(out), "--seed", "7", "--deterministic"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        runs.append(((out / "final.litn").read_bytes(), (out / "train.log").read_bytes()))
    same_ckpt = runs[0][0] == runs[1][0]
    same_log = runs[0][1] == runs[1][1]
    acceptance(9, "determinism", same_ckpt and same_log,
               f"two separate processes, seed 7: checkpoint bytes identical={same_ckpt} ({len(runs[0][0])} B), loss trace identical={same_log}")


def test_c10_ablation_plumbing(acceptance):
    base = dict(base_width=8, fc_width=16)
    data = synthetic_pairs(6, seed=1, h=32, w=32)
    cfg = TrainConfig(n_synthetic=6, synth_size=32, max_steps=50, deterministic=True)
    full = dict(LitNet(ModelConfig(**base)).named_parameters())

    def shapes(m):
        return {k: p.shape for k, p in m.named_parameters()}

    variants = {
        "attention off": (ModelConfig(**base, mran_attention=False, skip_attention=False), LossConfig()),
        "fixed kernel": (ModelConfig(**base, fixed_kernel=True), LossConfig()),
        "no channel split": (ModelConfig(**base, channel_split=False), LossConfig()),
        "plain L1": (ModelConfig(**base), LossConfig(w_r=1.0, w_g=1.0, w_b=1.0)),
    }
    notes = []
    ok = True
    for name, (mcfg, lcfg) in variants.items():
        res = train(cfg, mcfg, lcfg, data=data)
        finite = all(math.isfinite(v) for h in res.losses for v in h.values()) and len(res.losses) == 50
        sh = shapes(res.model)
        if name == "attention off":
            removed = set(full) - set(sh)
            struct = bool(removed) and all("attention" in k for k in removed) and not any("attention" in k for k in sh)
        elif name == "fixed kernel":
            struct = all(sh[f"mran.branches.{i}.conv.weight"][2:] == (3, 3) for i in range(3)) and count_params(mcfg) < count_params(ModelConfig(**base))
        elif name == "no channel split":
            struct = all(sh[f"mran.branches.{i}.conv.weight"][1] == 3 for i in range(3))
        else:
            struct = set(sh) == set(full)
        ok &= finite and struct
        notes.append(f"{name}: 50 steps finite={finite} registry ok={struct}")
    acceptance(10, "ablation plumbing", ok, "; ".join(notes))
