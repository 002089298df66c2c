"""Full network: multi-resolution attention stage, multi-scale encoder-decoder,
and the residual reconstruction heads for enhancement and super-resolution."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import ops
from .core.tensor import FlopCounter, ShapeError, Tensor
from .nn import CBAM, ConvBlock, DecoderLayer, EncoderLayer, Module

ENCODER_DEPTH = 3
# Initial scale of the reconstruction head's batch norm; see LitNet.__init__.
HEAD_BN_SCALE = 0.5


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture choices.

    ``base_width`` is the channel count of the RGB 1x1 features and of every
    channel-specific branch; ``fc_width`` is the width entering the
    encoder-decoder.  The defaults give about 0.43M parameters and 17 GFLOPs
    for a 256x256 input.
    """

    base_width: int = 32
    fc_width: int = 64
    branch_divisor: int = 8
    cbam_ratio: int = 4
    encoder_depth: int = ENCODER_DEPTH
    mode: str = "enhance"
    scale: Optional[int] = None
    mran_attention: bool = True
    skip_attention: bool = True
    fixed_kernel: bool = False
    channel_split: bool = True
    # bookkeeping filled in by validate()
    encoder_widths: tuple = field(default=(), init=False, repr=False, compare=False)
    decoder_widths: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.validate()

    @property
    def branch_kernels(self) -> tuple[int, int, int]:
        return (3, 3, 3) if self.fixed_kernel else (3, 5, 7)

    @property
    def out_channels(self) -> int:
        return 3 if self.mode == "enhance" else 3 * self.scale**2

    @property
    def fd_width(self) -> int:
        return self.fc_width + self.decoder_widths[-1]

    def validate(self) -> None:
        if self.encoder_depth != ENCODER_DEPTH:
            raise ConfigError(f"encoder_depth is fixed at {ENCODER_DEPTH}, got {self.encoder_depth}")
        if self.mode not in ("enhance", "superres"):
            raise ConfigError(f"mode must be 'enhance' or 'superres', got {self.mode!r}")
        if self.mode == "superres":
            if self.scale not in (2, 3, 4):
                raise ConfigError(f"superres scale must be 2, 3 or 4, got {self.scale}")
        elif self.scale is not None:
            raise ConfigError("scale is only meaningful in superres mode")
        for name in ("base_width", "fc_width", "branch_divisor", "cbam_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

        widths = []
        c = self.fc_width
        for level in range(self.encoder_depth):
            if c % self.branch_divisor:
                raise ConfigError(f"encoder {level + 1} input width {c} is not divisible by branch_divisor {self.branch_divisor}")
            c = 16 * (c // self.branch_divisor)
            widths.append(c)
        dec = []
        d = widths[-1]  # bottleneck keeps the deepest encoder width
        for skip in reversed(widths):
            if (d + skip) % 4:
                raise ConfigError(f"decoder concat width {d + skip} is not divisible by 4")
            d = (d + skip) // 4
            dec.append(d)
        self.encoder_widths = tuple(widths)
        self.decoder_widths = tuple(dec)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.init}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls) if f.init}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class MRAN(Module):
    """Full-resolution stage: RGB 1x1 features joined to R/G/B-specific kernels."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c0 = cfg.base_width
        cin = 1 if cfg.channel_split else 3
        self.channel_split = cfg.channel_split
        self.rgb = ConvBlock(3, c0, 1, rng)
        self.branches = [ConvBlock(cin, c0, k, rng) for k in cfg.branch_kernels]
        self.attention = [CBAM(2 * c0, rng, cfg.cbam_ratio) for _ in range(3)] if cfg.mran_attention else []

    def forward(self, x: Tensor) -> Tensor:
        f1 = self.rgb(x)
        feats = []
        for i, branch in enumerate(self.branches):
            src = x[:, i : i + 1] if self.channel_split else x
            fk = ops.concat_channels([branch(src), f1])
            if self.attention:
                fk = self.attention[i](fk)
            feats.append(fk)
        return ops.concat_channels(feats)


class MSAN(Module):
    """Encoder-decoder with pixel-unshuffle downsampling and gated skips."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        widths = (cfg.fc_width,) + cfg.encoder_widths
        self.encoders = [EncoderLayer(widths[i], cfg.branch_divisor, rng) for i in range(cfg.encoder_depth)]
        self.bottleneck = ConvBlock(widths[-1], widths[-1], 1, rng)
        self.decoders = [DecoderLayer(rng, cfg.skip_attention) for _ in range(cfg.encoder_depth)]

    def forward(self, fc: Tensor) -> Tensor:
        h, w = fc.shape[2:]
        factor = 2 ** len(self.encoders)
        if h % factor or w % factor:
            raise ShapeError(f"encoder-decoder needs spatial dims divisible by {factor}, got {h}x{w}")
        skips = []
        e = fc
        for enc in self.encoders:
            e = enc(e)
            skips.append(e)
        d = self.bottleneck(e)
        for dec, skip in zip(self.decoders, reversed(skips)):
            d = dec(d, skip)
        return ops.concat_channels([fc, d])


class LitNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.mran = MRAN(cfg, rng)
        self.fc = ConvBlock(6 * cfg.base_width, cfg.fc_width, 3, rng)
        self.msan = MSAN(cfg, rng)
        # Zero conv: the network starts as the identity / bicubic baseline.  The
        # batch norm after it normalises the conv output to unit variance as soon
        # as the first update makes it nonzero, so the scale starts at
        # HEAD_BN_SCALE to keep that first residual from swamping the input.
        self.head = ConvBlock(cfg.fd_width, cfg.out_channels, 3, rng, zero_conv=True)
        self.head.bn.weight.data[...] = HEAD_BN_SCALE

    def features(self, x: Tensor) -> Tensor:
        """Encoder-decoder output ``F_d`` (concat of ``F_c`` and the decoded map)."""
        return self.msan(self.fc(self.mran(x)))

    def forward(self, x: Tensor) -> Tensor:
        """Unclamped prediction: enhanced image, or super-resolved image at ``scale`` x."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"LitNet expects [N, 3, H, W] input, got {x.shape}")
        h, w = x.shape[2:]
        if h % 8 or w % 8:
            raise ShapeError(f"input spatial dims must be divisible by 8, got {h}x{w}")
        residual = self.head(self.features(x))
        if self.cfg.mode == "enhance":
            return residual + x
        sr_residual = residual
        s = self.cfg.scale
        return ops.pixel_shuffle(sr_residual, s) + ops.bicubic_upsample(x, s)


def predict(model: LitNet, x: Tensor) -> np.ndarray:
    """Inference: evaluation-mode forward pass clamped to [0, 1]."""
    was_training = model.training
    model.eval()
    try:
        out = model(x)
    finally:
        model.train(was_training)
    return np.clip(out.data, 0.0, 1.0)


def count_params(cfg: ModelConfig) -> int:
    """Number of trainable scalars (batch-norm running statistics excluded)."""
    return sum(p.size for p in LitNet(cfg).parameters())


def count_flops(cfg: ModelConfig, h: int = 256, w: int = 256) -> int:
    """Forward FLOPs for one ``h x w`` image, traced from an executed pass.

    Convolutions contribute ``2 * MACs`` plus bias adds; normalisation,
    activations, gating products and reductions contribute their elementwise
    operation counts.
    """
    model = LitNet(cfg).eval()
    x = Tensor(np.zeros((1, 3, h, w), dtype=np.float32))
    with FlopCounter() as counter:
        model(x)
    return counter.flops
