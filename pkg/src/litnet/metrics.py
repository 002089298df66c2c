"""Full-reference and reference-free image quality metrics.

Images are ``[H, W, 3]`` arrays with values in ``[0, 1]``; every metric is
computed in float64 and returns a Python float.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import ops
from .core.tensor import Tensor
from .losses import LossConfig, ssim_components

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

CSV_COLUMNS = ("mse", "psnr", "ssim", "ms_ssim", "uiqm", "uicm", "uism", "uiconm")
PAIRED = ("mse", "psnr", "ssim", "ms_ssim")
REFERENCE_FREE = ("uiqm", "uicm", "uism", "uiconm")


class MetricError(ValueError):
    pass


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images report ``PSNR_CAP``."""
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return 10.0 * math.log10(max_val**2 / err)


def _as_batch(img: np.ndarray) -> Tensor:
    if img.ndim != 3 or img.shape[2] != 3:
        raise MetricError(f"expected an [H, W, 3] image, got shape {img.shape}")
    return Tensor(np.ascontiguousarray(img.transpose(2, 0, 1)[None]))


def _ssim_terms(a: np.ndarray, b: np.ndarray, cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel window means of the SSIM map and of its contrast-structure part."""
    lum, cs = ssim_components(_as_batch(a), _as_batch(b), cfg)
    return (lum.data * cs.data).mean(axis=(0, 2, 3)), cs.data.mean(axis=(0, 2, 3))


def ssim_index(a, b, data_range: float = 1.0) -> float:
    a, b = _pair(a, b)
    cfg = LossConfig(data_range=data_range)
    if min(a.shape[:2]) < cfg.ssim_window:
        raise MetricError(f"image {a.shape[0]}x{a.shape[1]} is smaller than the {cfg.ssim_window}px SSIM window")
    ssim_c, _ = _ssim_terms(a, b, cfg)
    return float(ssim_c.mean())


def ms_ssim_scales(h: int, w: int, window: int = 11, max_scales: int = 5) -> int:
    """Number of dyadic scales at which the SSIM window still fits."""
    n, size = 0, min(h, w)
    while n < max_scales and size >= window:
        n += 1
        size //= 2
    return n


def _halve(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    t = _as_batch(img[:h, :w])
    return ops.avg_pool2d(t, 2).data[0].transpose(1, 2, 0)


def ms_ssim(a, b, data_range: float = 1.0, weights: Sequence[float] = MS_SSIM_WEIGHTS) -> float:
    """Multi-scale SSIM with 2x2 mean-pool downsampling.

    Contrast-structure terms of the coarser scales and the SSIM of the last
    scale are clamped at zero before exponentiation.  When the image is too
    small for every scale, the leading weights are kept and renormalised.
    """
    a, b = _pair(a, b)
    cfg = LossConfig(data_range=data_range)
    n = ms_ssim_scales(a.shape[0], a.shape[1], cfg.ssim_window, len(weights))
    if n == 0:
        raise MetricError(f"image {a.shape[0]}x{a.shape[1]} is smaller than the {cfg.ssim_window}px SSIM window")
    w = np.asarray(weights[:n], dtype=np.float64)
    if n < len(weights):
        warnings.warn(f"MS-SSIM: {a.shape[0]}x{a.shape[1]} image supports only {n} of {len(weights)} scales", stacklevel=2)
        w = w / w.sum()
    result = np.ones(3)
    for j in range(n):
        ssim_c, cs_c = _ssim_terms(a, b, cfg)
        term = ssim_c if j == n - 1 else cs_c
        result *= np.maximum(term, 0.0) ** w[j]
        if j < n - 1:
            a, b = _halve(a), _halve(b)
    return float(result.mean())


# -- UIQM -------------------------------------------------------------------------

@dataclass(frozen=True)
class UIQMConfig:
    alpha_low: float = 0.1
    alpha_high: float = 0.1
    block: int = 8
    c1: float = 0.0282
    c2: float = 0.2953
    c3: float = 3.5753
    luma: tuple[float, float, float] = (0.299, 0.587, 0.114)


def _trimmed_stats(x: np.ndarray, lo: float, hi: float) -> tuple[float, float]:
    """Asymmetric alpha-trimmed mean and the spread about it over all samples."""
    s = np.sort(x.ravel())
    k = s.size
    start = int(math.ceil(lo * k))
    stop = k - int(math.floor(hi * k))
    mu = float(s[start:stop].mean())
    var = float(np.mean((s - mu) ** 2))
    return mu, var


def uicm(img: np.ndarray, cfg: UIQMConfig = UIQMConfig()) -> float:
    x = 255.0 * img
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    mu_rg, var_rg = _trimmed_stats(r - g, cfg.alpha_low, cfg.alpha_high)
    mu_yb, var_yb = _trimmed_stats((r + g) / 2 - b, cfg.alpha_low, cfg.alpha_high)
    return -0.0268 * math.sqrt(mu_rg**2 + mu_yb**2) + 0.1586 * math.sqrt(var_rg + var_yb)


def _blocks(x: np.ndarray, size: int) -> np.ndarray:
    """Tile ``[H, W, ...]`` into ``[k1*k2, size*size*...]`` blocks, dropping the remainder."""
    k1, k2 = x.shape[0] // size, x.shape[1] // size
    if k1 == 0 or k2 == 0:
        raise MetricError(f"image {x.shape[0]}x{x.shape[1]} is smaller than one {size}x{size} block")
    x = x[: k1 * size, : k2 * size]
    x = x.reshape(k1, size, k2, size, *x.shape[2:]).swapaxes(1, 2)
    return x.reshape(k1 * k2, -1)


def eme(channel: np.ndarray, block: int) -> float:
    """``2 / (k1 k2) * sum log(max / min)`` over blocks; blocks with a zero extreme add nothing."""
    b = _blocks(channel, block)
    mx, mn = b.max(axis=1), b.min(axis=1)
    ok = (mx > 0) & (mn > 0)
    return float(2.0 / b.shape[0] * np.sum(np.log(mx[ok] / mn[ok])))


def sobel_magnitude(channel: np.ndarray) -> np.ndarray:
    return np.hypot(ndimage.sobel(channel, axis=0), ndimage.sobel(channel, axis=1))


def uism(img: np.ndarray, cfg: UIQMConfig = UIQMConfig()) -> float:
    x = 255.0 * img
    total = 0.0
    for c, weight in enumerate(cfg.luma):
        mag = sobel_magnitude(x[..., c])
        peak = mag.max()
        if peak > 0:
            mag = mag * (255.0 / peak)
        total += weight * eme(mag * x[..., c], cfg.block)
    return total


def logamee(x: np.ndarray, block: int) -> float:
    """Michelson-contrast entropy over blocks spanning all three channels."""
    b = _blocks(x, block)
    mx, mn = b.max(axis=1), b.min(axis=1)
    top, bot = mx - mn, mx + mn
    ok = (top > 0) & (bot > 0)
    ratio = top[ok] / bot[ok]
    return float(-1.0 / b.shape[0] * np.sum(ratio * np.log(ratio)))


def uiconm(img: np.ndarray, cfg: UIQMConfig = UIQMConfig()) -> float:
    return logamee(255.0 * img, cfg.block)


def uiqm(img, cfg: UIQMConfig = UIQMConfig()) -> tuple[float, float, float, float]:
    """Return ``(uiqm, uicm, uism, uiconm)`` for an RGB image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise MetricError(f"UIQM needs an [H, W, 3] RGB image, got shape {img.shape}")
    cm, sm, con = uicm(img, cfg), uism(img, cfg), uiconm(img, cfg)
    return cfg.c1 * cm + cfg.c2 * sm + cfg.c3 * con, cm, sm, con


# -- reports ----------------------------------------------------------------------

def compute_metrics(pred, gt=None, metrics: Iterable[str] = CSV_COLUMNS, bitdepth: str = "8") -> dict[str, float]:
    """Evaluate ``metrics`` on one image (pair).

    In 8-bit mode both images are quantised to integers and PSNR uses a peak of
    255; in float mode the raw values are used with a peak of 1.
    """
    metrics = list(metrics)
    unknown = set(metrics) - set(CSV_COLUMNS)
    if unknown:
        raise MetricError(f"unknown metrics: {sorted(unknown)}")
    if bitdepth not in ("8", "float"):
        raise MetricError(f"bitdepth must be '8' or 'float', got {bitdepth!r}")
    pred = np.asarray(pred, dtype=np.float64)
    if bitdepth == "8":
        pred = quantize8(pred) / 255.0
        gt = None if gt is None else quantize8(np.asarray(gt, dtype=np.float64)) / 255.0
    out: dict[str, float] = {}
    if gt is not None:
        if "mse" in metrics:
            out["mse"] = mse(pred, gt) * (255.0**2 if bitdepth == "8" else 1.0)
        if "psnr" in metrics:
            out["psnr"] = psnr(pred, gt)
        if "ssim" in metrics:
            out["ssim"] = ssim_index(pred, gt)
        if "ms_ssim" in metrics:
            out["ms_ssim"] = ms_ssim(pred, gt)
    if any(m in metrics for m in REFERENCE_FREE):
        q, cm, sm, con = uiqm(pred)
        for name, v in zip(REFERENCE_FREE, (q, cm, sm, con)):
            if name in metrics:
                out[name] = v
    return out


def quantize8(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half up to integer levels 0..255 (as float64)."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5)


@dataclass
class MetricReport:
    rows: list[tuple[str, dict[str, float]]] = field(default_factory=list)
    columns: tuple[str, ...] = CSV_COLUMNS

    def values(self, metric: str) -> np.ndarray:
        return np.array([r[metric] for _, r in self.rows if metric in r], dtype=np.float64)

    def mean(self) -> dict[str, float]:
        return {m: float(v.mean()) for m in self.columns if (v := self.values(m)).size}

    def std(self) -> dict[str, float]:
        return {m: float(v.std()) for m in self.columns if (v := self.values(m)).size}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("image",) + self.columns)
            for name, row in self.rows:
                writer.writerow([name] + [_cell(row.get(m)) for m in self.columns])
            for label, agg in (("AGGREGATE_MEAN", self.mean()), ("AGGREGATE_STD", self.std())):
                writer.writerow([label] + [_cell(agg.get(m)) for m in self.columns])


def _cell(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))


IMAGE_SUFFIXES = (".png",)


def _index_dir(path: Path) -> dict[str, Path]:
    if not path.is_dir():
        raise MetricError(f"not a directory: {path}")
    return {p.stem: p for p in sorted(path.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def default_workers() -> int:
    env = os.environ.get("LITNET_THREADS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def evaluate_pair_dirs(
    pred_dir,
    gt_dir=None,
    metrics: Iterable[str] = CSV_COLUMNS,
    bitdepth: str = "8",
    workers: Optional[int] = None,
) -> MetricReport:
    """Score every image in ``pred_dir``, paired by file stem with ``gt_dir``.

    Without ``gt_dir`` only the reference-free metrics are computed.  Images are
    scored concurrently (``workers`` threads, by default ``LITNET_THREADS`` or the
    CPU count); rows always come out sorted by stem.
    """
    from .data import load_image

    metrics = tuple(metrics)
    preds = _index_dir(Path(pred_dir))
    if not preds:
        raise MetricError(f"no PNG images in {pred_dir}")
    gts = None
    if gt_dir is not None:
        gts = _index_dir(Path(gt_dir))
        missing_pred = sorted(set(gts) - set(preds))
        missing_gt = sorted(set(preds) - set(gts))
        if missing_pred or missing_gt:
            parts = []
            if missing_pred:
                parts.append(f"no prediction for {', '.join(missing_pred)}")
            if missing_gt:
                parts.append(f"no ground truth for {', '.join(missing_gt)}")
            raise MetricError("unpaired files: " + "; ".join(parts))
    else:
        metrics = tuple(m for m in metrics if m in REFERENCE_FREE)

    def score(stem: str) -> tuple[str, dict[str, float]]:
        pred = load_image(preds[stem])
        gt = load_image(gts[stem]) if gts is not None else None
        if gt is not None and gt.shape != pred.shape:
            raise MetricError(f"{stem}: prediction {pred.shape[:2]} and ground truth {gt.shape[:2]} differ in size")
        return stem, compute_metrics(pred, gt, metrics, bitdepth)

    stems = sorted(preds)
    n = min(workers or default_workers(), len(stems))
    report = MetricReport(columns=CSV_COLUMNS)
    if n <= 1:
        report.rows.extend(map(score, stems))
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            report.rows.extend(pool.map(score, stems))
    return report
