"""Training objective: weighted per-channel L1, SSIM and feature-space losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Protocol, Sequence

import numpy as np

from .core import ops
from .core.tensor import ShapeError, Tensor, abs_, as_tensor, mean, relu, scale


@dataclass(frozen=True)
class LossConfig:
    w_r: float = 1.0
    w_g: float = 1.5
    w_b: float = 2.0
    lambda_l1: float = 1.0
    lambda_p: float = 0.02
    lambda_s: float = 0.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0
    ssim_window: int = 11
    ssim_sigma: float = 1.5

    def __post_init__(self) -> None:
        for name in ("w_r", "w_g", "w_b", "lambda_l1", "lambda_p", "lambda_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.ssim_window % 2 == 0 or self.ssim_window < 1:
            raise ValueError(f"ssim_window must be a positive odd size, got {self.ssim_window}")

    @property
    def channel_weights(self) -> tuple[float, float, float]:
        return (self.w_r, self.w_g, self.w_b)


def _check_pair(pred: Tensor, target: Tensor, op: str) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"{op}: prediction {pred.shape} and target {target.shape} differ")


def cl1_loss(pred: Tensor, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """Sum over R, G, B of ``w_c * mean |pred_c - target_c|`` (mean over batch and pixels)."""
    target = as_tensor(target, pred.dtype)
    _check_pair(pred, target, "cl1_loss")
    diff = abs_(pred - target)
    per_channel = mean(diff, axis=(0, 2, 3))
    weights = Tensor(np.asarray(cfg.channel_weights, dtype=pred.dtype))
    return (per_channel * weights).sum()


# -- SSIM ---------------------------------------------------------------------

def gaussian_taps(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def ssim_components(a: Tensor, b: Tensor, cfg: LossConfig = LossConfig()) -> tuple[Tensor, Tensor]:
    """Luminance and contrast-structure maps over a Gaussian window ('valid' extent)."""
    _check_pair(a, b, "ssim")
    taps = gaussian_taps(cfg.ssim_window, cfg.ssim_sigma)
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2

    def filt(t):
        return ops.separable_filter(t, taps)

    mu_a, mu_b = filt(a), filt(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = filt(a * a) - mu_aa
    var_b = filt(b * b) - mu_bb
    cov = filt(a * b) - mu_ab
    luminance = (scale(mu_ab, 2.0) + c1) / (mu_aa + mu_bb + c1)
    contrast_structure = (scale(cov, 2.0) + c2) / (var_a + var_b + c2)
    return luminance, contrast_structure


def ssim_map(a: Tensor, b, cfg: LossConfig = LossConfig()) -> Tensor:
    """Local SSIM per channel, shape ``[N, C, H - win + 1, W - win + 1]``."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if min(a.shape[2:]) < cfg.ssim_window:
        raise ShapeError(f"ssim: image {a.shape[2]}x{a.shape[3]} is smaller than the {cfg.ssim_window}px window")
    lum, cs = ssim_components(a, b, cfg)
    return lum * cs


def ssim_loss(pred: Tensor, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """``0.5 * mean(1 - SSIM)`` over batch, channels and window positions."""
    return scale(1.0 - mean(ssim_map(pred, target, cfg)), 0.5)


# -- perceptual -----------------------------------------------------------------

class FeatureExtractor(Protocol):
    """Frozen map from an ``[N, 3, H, W]`` image batch to a feature tensor."""

    def __call__(self, x: Tensor) -> Tensor: ...


def identity_extractor(x: Tensor) -> Tensor:
    return x


class ConvFeatureExtractor:
    """Fixed two-stage conv stack shaped like VGG16 up to relu2_2.

    ``conv0 -> relu -> conv1 -> relu -> avgpool2 -> conv2 -> relu -> conv3 -> relu``.
    Weights are drawn once from ``seed`` and never trained.  Real VGG16 weights
    (``features.0/2/5/7`` renamed to ``conv0..conv3``) can be loaded with
    :meth:`from_checkpoint`, together with ImageNet input normalisation.
    """

    def __init__(
        self,
        widths: Sequence[int] = (8, 8, 16, 16),
        seed: int = 0,
        input_mean: Optional[Sequence[float]] = None,
        input_std: Optional[Sequence[float]] = None,
    ):
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        cin = 3
        for cout in widths:
            std = np.sqrt(2.0 / (cin * 9))
            self.weights.append(Tensor(rng.normal(0.0, std, (cout, cin, 3, 3)).astype(np.float32)))
            self.biases.append(Tensor(np.zeros(cout, dtype=np.float32)))
            cin = cout
        self.input_mean = None if input_mean is None else np.asarray(input_mean, np.float32).reshape(1, 3, 1, 1)
        self.input_std = None if input_std is None else np.asarray(input_std, np.float32).reshape(1, 3, 1, 1)

    @classmethod
    def from_checkpoint(cls, path, normalize_imagenet: bool = True) -> "ConvFeatureExtractor":
        from .checkpoint import read_checkpoint

        _, tensors = read_checkpoint(path)
        ext = cls.__new__(cls)
        ext.weights = [Tensor(tensors[f"conv{i}.weight"].astype(np.float32)) for i in range(4)]
        ext.biases = [Tensor(tensors[f"conv{i}.bias"].astype(np.float32)) for i in range(4)]
        if normalize_imagenet:
            ext.input_mean = np.array([0.485, 0.456, 0.406], np.float32).reshape(1, 3, 1, 1)
            ext.input_std = np.array([0.229, 0.224, 0.225], np.float32).reshape(1, 3, 1, 1)
        else:
            ext.input_mean = ext.input_std = None
        return ext

    def __call__(self, x: Tensor) -> Tensor:
        if self.input_mean is not None:
            x = (x - self.input_mean.astype(x.dtype)) / self.input_std.astype(x.dtype)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if i == 2:
                x = ops.avg_pool2d(x, 2)
            x = relu(ops.conv2d(x, w, b))
        return x


_default_extractor: Optional[ConvFeatureExtractor] = None


def default_extractor() -> ConvFeatureExtractor:
    global _default_extractor
    if _default_extractor is None:
        _default_extractor = ConvFeatureExtractor()
    return _default_extractor


def perceptual_loss(pred: Tensor, target, extractor: Optional[FeatureExtractor] = None) -> Tensor:
    """Mean squared distance between extractor features of ``pred`` and ``target``."""
    extractor = extractor or default_extractor()
    target = as_tensor(target, pred.dtype)
    _check_pair(pred, target, "perceptual_loss")
    fp = extractor(pred)
    ft = extractor(Tensor(target.data))  # constant: no gradient reaches the target
    if fp.shape != ft.shape:
        raise ShapeError(f"perceptual_loss: feature shapes {fp.shape} and {ft.shape} differ")
    d = fp - ft
    return mean(d * d)


# -- total ----------------------------------------------------------------------

class LossTerms(NamedTuple):
    total: Tensor
    cl1: Tensor
    perceptual: Tensor
    ssim: Tensor

    def as_floats(self) -> dict[str, float]:
        return {"l_T": self.total.item(), "cl1": self.cl1.item(), "l_p": self.perceptual.item(), "l_s": self.ssim.item()}


def total_loss(
    pred: Tensor,
    target,
    cfg: LossConfig = LossConfig(),
    extractor: Optional[FeatureExtractor] = None,
) -> LossTerms:
    """``lambda_l1 * cl1 + lambda_p * l_p + lambda_s * l_s`` plus the individual terms."""
    target = as_tensor(target, pred.dtype)
    l1 = cl1_loss(pred, target, cfg)
    lp = perceptual_loss(pred, target, extractor)
    ls = ssim_loss(pred, target, cfg)
    total = scale(l1, cfg.lambda_l1) + scale(lp, cfg.lambda_p) + scale(ls, cfg.lambda_s)
    return LossTerms(total, l1, lp, ls)
