"""``litnet`` command line."""

from __future__ import annotations

import argparse
import dataclasses
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .core.tensor import ShapeError, Tensor
from .data import DegradationParams, ImageFormatError, area_downsample, from_batch, load_image, save_image, synth_degrade, to_batch
from .gradsuite import run_suite
from .metrics import MetricError, evaluate_pair_dirs
from .model import ConfigError, LitNet, ModelConfig, count_flops, count_params, predict
from .optim import MissingGradientError
from .train import TrainConfig, TrainingDivergedError, kernel_threads, load_config, train

EXPECTED_ERRORS = (
    CheckpointError, ConfigError, ShapeError, ImageFormatError, MetricError,
    TrainingDivergedError, MissingGradientError, OSError, KeyError, ValueError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def pad_to_multiple(x: np.ndarray, m: int = 8) -> tuple[np.ndarray, int, int]:
    """Reflection-pad the bottom/right of ``[N, C, H, W]`` up to multiples of ``m``."""
    h, w = x.shape[2:]
    ph, pw = -h % m, -w % m
    if ph or pw:
        mode = "reflect" if h > 1 and w > 1 else "edge"
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode)
    return x, h, w


def run_model(model: LitNet, img: np.ndarray) -> np.ndarray:
    """Inference on an ``[H, W, 3]`` image of any size; output is cropped to match."""
    s = model.cfg.scale if model.cfg.mode == "superres" else 1
    x, h, w = pad_to_multiple(to_batch(img))
    out = predict(model, Tensor(x))
    return from_batch(out[:, :, : h * s, : w * s])


def _load_for_mode(path: str, mode: str, scale: Optional[int] = None) -> LitNet:
    ckpt = load_checkpoint(path)
    cfg = ckpt.model_config
    if cfg.mode != mode:
        raise ConfigError(f"checkpoint {path} was trained for {cfg.mode}, not {mode}")
    if scale is not None and cfg.scale != scale:
        raise ConfigError(f"checkpoint {path} is a x{cfg.scale} model, requested x{scale}")
    return ckpt.build_model()


# -- subcommands ----------------------------------------------------------------------

def cmd_train(args) -> int:
    tcfg, mcfg, lcfg = load_config(args.config) if args.config else (TrainConfig(), ModelConfig(), None)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    if args.steps is not None:
        overrides["max_steps"] = args.steps
    if args.lr is not None:
        overrides["lr"] = args.lr
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.resume:
        overrides["resume"] = args.resume
    tcfg = dataclasses.replace(tcfg, **overrides)
    kwargs = {} if lcfg is None else {"loss_cfg": lcfg}
    result = train(tcfg, mcfg, out_dir=args.out, log=sys.stdout if args.verbose else None, **kwargs)
    print(f"wrote {result.checkpoint}")
    return 0


def cmd_enhance(args) -> int:
    img = load_image(args.inp)
    model = _load_for_mode(args.ckpt, "enhance")
    with kernel_threads():
        out = run_model(model, img)
    save_image(out, args.out)
    return 0


def cmd_superres(args) -> int:
    img = load_image(args.inp)
    model = _load_for_mode(args.ckpt, "superres", args.scale)
    with kernel_threads():
        out = run_model(model, img)
    save_image(out, args.out)
    return 0


def cmd_evaluate(args) -> int:
    metrics = tuple(args.metrics.split(",")) if args.metrics else None
    kwargs = {"metrics": metrics} if metrics else {}
    report = evaluate_pair_dirs(args.pred, args.gt, bitdepth=args.bitdepth, **kwargs)
    report.write_csv(args.out)
    means = report.mean()
    print("\t".join(f"{k}={v:.4f}" for k, v in means.items()))
    return 0


def cmd_count_params(args) -> int:
    cfg = load_config(args.config)[1] if args.config else ModelConfig()
    h, w = args.size
    print(f"params\t{count_params(cfg)}")
    print(f"flops@{h}x{w}\t{count_flops(cfg, h, w)}")
    return 0


def cmd_gradcheck(args) -> int:
    outcomes = run_suite(full=args.full)
    for o in outcomes:
        print(o.line())
    failed = [o.name for o in outcomes if not o.passed]
    if failed:
        raise ValueError(f"gradient check failed for: {', '.join(failed)}")
    print(f"all {len(outcomes)} checks passed")
    return 0


def cmd_make_synth(args) -> int:
    out = Path(args.out)
    if args.clean:
        clean_dir = Path(args.clean)
        if not clean_dir.is_dir():
            raise ImageFormatError(f"not a directory: {clean_dir}")
        sources = sorted(clean_dir.glob("*.png"))
        if not sources:
            raise ImageFormatError(f"no PNG images in {clean_dir}")
        images = [(p.stem, load_image(p)) for p in sources]
    else:
        from .data import make_clean_scene

        rng = np.random.default_rng(args.seed)
        images = [(f"scene_{i:04d}", make_clean_scene(rng, args.size, args.size)) for i in range(args.count)]
    (out / "input").mkdir(parents=True, exist_ok=True)
    (out / "target").mkdir(parents=True, exist_ok=True)
    for i, (stem, clean) in enumerate(images):
        params = DegradationParams.sample(np.random.default_rng([args.seed, i]))
        degraded = synth_degrade(clean, params)
        if args.scale:
            degraded = area_downsample(degraded, args.scale)
            s = args.scale
            clean = clean[: degraded.shape[0] * s, : degraded.shape[1] * s]
        save_image(degraded, out / "input" / f"{stem}.png")
        save_image(clean, out / "target" / f"{stem}.png")
    print(f"wrote {len(images)} pairs to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="litnet", description="Lightweight underwater image enhancement and super-resolution.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="INI file with [train], [model], [loss] sections")
    t.add_argument("--out", required=True, help="directory for train.log and checkpoints")
    t.add_argument("--seed", type=int)
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--resume", help="continue from a checkpoint written by train")
    t.add_argument("--verbose", action="store_true", help="echo the per-step log to stdout")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("enhance", help="enhance one image")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_enhance)

    s = sub.add_parser("superres", help="super-resolve one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scale", type=int, required=True, choices=(2, 3, 4))
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_superres)

    v = sub.add_parser("evaluate", help="score predictions, write a CSV report")
    v.add_argument("--pred", required=True)
    v.add_argument("--gt")
    v.add_argument("--out", required=True)
    v.add_argument("--bitdepth", choices=("8", "float"), default="8")
    v.add_argument("--metrics", help="comma-separated subset of mse,psnr,ssim,ms_ssim,uiqm,uicm,uism,uiconm")
    v.set_defaults(fn=cmd_evaluate)

    c = sub.add_parser("count-params", help="parameter and FLOP counts")
    c.add_argument("--config")
    c.add_argument("--size", type=int, nargs=2, default=(256, 256), metavar=("H", "W"))
    c.set_defaults(fn=cmd_count_params)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--full", action="store_true", help="check every entry and all super-resolution scales")
    g.set_defaults(fn=cmd_gradcheck)

    m = sub.add_parser("make-synth", help="write degraded/clean training pairs")
    m.add_argument("--clean", help="directory of clean PNGs (omit to generate procedural scenes)")
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--count", type=int, default=8, help="number of procedural scenes without --clean")
    m.add_argument("--size", type=int, default=64, help="procedural scene size")
    m.add_argument("--scale", type=int, choices=(2, 3, 4), help="also downsample inputs for super-resolution")
    m.set_defaults(fn=cmd_make_synth)
    return p


def _one_line(msg: str) -> str:
    return " ".join(str(msg).split())


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            return args.fn(args)
    except UsageError as exc:
        print(f"litnet: error: usage: {_one_line(exc)}", file=sys.stderr)
    except EXPECTED_ERRORS as exc:
        print(f"litnet: error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
