"""Training loop, configuration files and thread control."""

from __future__ import annotations

import configparser
import dataclasses
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, TextIO

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import Checkpoint, load_checkpoint, load_model_state, save_checkpoint
from .core.tensor import GradientTape, Tensor
from .data import load_pair_dirs, synthetic_pairs
from .losses import ConvFeatureExtractor, FeatureExtractor, LossConfig, total_loss
from .metrics import psnr
from .model import ConfigError, LitNet, ModelConfig, predict
from .optim import Adam

LOG_HEADER = "step\tl_T\tcl1\tl_p\tl_s"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int = 500
    seed: int = 0
    synthetic: bool = True
    n_synthetic: int = 8
    synth_size: int = 64
    input_dir: str = ""
    target_dir: str = ""
    checkpoint_every: int = 0  # 0: only the final checkpoint
    deterministic: bool = False
    perceptual_weights: str = ""  # optional checkpoint holding conv0..conv3 extractor weights
    resume: str = ""

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 for batch-norm statistics, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.max_steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("max_steps and checkpoint_every must be non-negative")
        if not self.synthetic and not (self.input_dir and self.target_dir):
            raise ConfigError("input_dir and target_dir are required when synthetic = false")


# -- config files ------------------------------------------------------------------

def _convert(value: str, default, key: str):
    if isinstance(default, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(float(v) for v in value.split(","))
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return value


def _section_to_kwargs(section: configparser.SectionProxy, cls) -> dict:
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    out = {}
    for key, value in section.items():
        if key not in fields:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        if cls is ModelConfig and key == "scale":
            out[key] = None if value.strip().lower() in ("", "none") else _convert(value, 0, key)
            continue
        default = fields[key].default
        out[key] = _convert(value, default, f"[{section.name}] {key}")
    return out


def load_config(path) -> tuple[TrainConfig, ModelConfig, LossConfig]:
    """Read ``[train]``, ``[model]`` and ``[loss]`` sections of an INI-style file."""
    parser = configparser.ConfigParser()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser.read(path)
    unknown = set(parser.sections()) - {"train", "model", "loss"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    get = lambda name, cls: _section_to_kwargs(parser[name], cls) if parser.has_section(name) else {}
    return (
        TrainConfig(**get("train", TrainConfig)),
        ModelConfig(**get("model", ModelConfig)),
        LossConfig(**get("loss", LossConfig)),
    )


# -- threads ------------------------------------------------------------------------

@contextmanager
def kernel_threads(deterministic: bool = False):
    """Cap BLAS threads: one in deterministic mode, else ``LITNET_THREADS`` if set."""
    if deterministic:
        limit: Optional[int] = 1
    else:
        env = os.environ.get("LITNET_THREADS")
        limit = int(env) if env else None
    if limit is None:
        yield
    else:
        with threadpool_limits(limits=limit):
            yield


# -- training ------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: LitNet
    optimizer: Adam
    losses: list[dict[str, float]]
    checkpoint: Optional[Path]


def training_data(cfg: TrainConfig, model_cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    s = model_cfg.scale if model_cfg.mode == "superres" else None
    if cfg.synthetic:
        size = cfg.synth_size
        if size % 8:
            raise ConfigError(f"synth_size must be a multiple of 8, got {size}")
        return synthetic_pairs(cfg.n_synthetic, cfg.seed, size * (s or 1), size * (s or 1), scale=s)
    return load_pair_dirs(cfg.input_dir, cfg.target_dir, scale=s)


def format_log_line(step: int, terms: dict[str, float]) -> str:
    return f"{step}\t{terms['l_T']!r}\t{terms['cl1']!r}\t{terms['l_p']!r}\t{terms['l_s']!r}"


def train(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    loss_cfg: LossConfig = LossConfig(),
    out_dir=None,
    data: Optional[tuple[np.ndarray, np.ndarray]] = None,
    extractor: Optional[FeatureExtractor] = None,
    log: Optional[TextIO] = None,
    on_step: Optional[Callable[[int, dict[str, float]], None]] = None,
) -> TrainResult:
    """Optimise a fresh (or resumed) model with Adam on paired data.

    Each step draws ``batch_size`` distinct pairs.  With ``out_dir`` the per-step
    log is written to ``train.log`` and checkpoints to ``step_XXXXXX.litn`` at
    the configured cadence plus ``final.litn``.
    """
    with kernel_threads(cfg.deterministic):
        return _train(cfg, model_cfg, loss_cfg, out_dir, data, extractor, log, on_step)


def _train(cfg, model_cfg, loss_cfg, out_dir, data, extractor, log, on_step) -> TrainResult:
    inputs, targets = data if data is not None else training_data(cfg, model_cfg)
    n = inputs.shape[0]
    if cfg.batch_size > n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds the {n} available training pairs")
    if extractor is None:
        extractor = (
            ConvFeatureExtractor.from_checkpoint(cfg.perceptual_weights)
            if cfg.perceptual_weights
            else ConvFeatureExtractor()
        )

    model = LitNet(model_cfg, seed=cfg.seed)
    opt = Adam(model.named_parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    start = 0
    if cfg.resume:
        ck = load_checkpoint(cfg.resume)
        load_model_state(model, ck.model_state)
        opt.load_state(ck.adam_m, ck.adam_v, ck.step)
        if ck.rng_state is not None:
            rng.bit_generator.state = ck.rng_state
        start = ck.step

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train.log", "a" if cfg.resume else "w")
        if not cfg.resume:
            log_fh.write(LOG_HEADER + "\n")
    sinks = [s for s in (log, log_fh) if s is not None]

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint.from_model(
            model,
            adam_m=opt.m, adam_v=opt.v, step=step, seed=cfg.seed,
            rng_state=rng.bit_generator.state,
            extra={"lr": cfg.lr, "batch_size": cfg.batch_size},
        )

    history = []
    last_ckpt = None
    model.train()
    try:
        for step in range(start + 1, cfg.max_steps + 1):
            idx = np.sort(rng.choice(n, cfg.batch_size, replace=False))
            x = Tensor(inputs[idx])
            with GradientTape() as tape:
                terms = total_loss(model(x), targets[idx], loss_cfg, extractor)
            values = terms.as_floats()
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingDivergedError(f"non-finite loss at step {step}: {values}")
            tape.backward(terms.total)
            opt.step()
            history.append(values)
            line = format_log_line(step, values)
            for s in sinks:
                s.write(line + "\n")
            if on_step is not None:
                on_step(step, values)
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                last_ckpt = out / f"step_{step:06d}.litn"
                save_checkpoint(last_ckpt, snapshot(step))
        if out is not None:
            last_ckpt = out / "final.litn"
            save_checkpoint(last_ckpt, snapshot(max(start, cfg.max_steps)))
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(model, opt, history, last_ckpt)


def dataset_psnr(model: LitNet, inputs: np.ndarray, targets: np.ndarray, batch: int = 8) -> float:
    """Mean per-image PSNR (peak 1) of clamped evaluation-mode predictions."""
    scores = []
    for i in range(0, inputs.shape[0], batch):
        pred = predict(model, Tensor(inputs[i : i + batch]))
        for p, t in zip(pred, targets[i : i + batch]):
            scores.append(psnr(p, t))
    return float(np.mean(scores))
