"""Image I/O, synthetic underwater degradation and paired datasets."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage


class ImageFormatError(ValueError):
    pass


# -- I/O --------------------------------------------------------------------------

_EIGHT_BIT_MODES = {"L", "RGB", "RGBA", "LA", "P"}


def load_image(path) -> np.ndarray:
    """Read an 8-bit image as float64 ``[H, W, 3]`` in [0, 1].

    Grayscale is replicated to RGB; an alpha channel is dropped with a warning.
    """
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise ImageFormatError(f"{path}: cannot read image ({exc})") from None
    if img.mode not in _EIGHT_BIT_MODES:
        raise ImageFormatError(f"{path}: unsupported bit depth / mode {img.mode!r}; only 8-bit images are supported")
    if img.mode == "P":
        img = img.convert("RGBA" if "transparency" in img.info else "RGB")
    if img.mode in ("RGBA", "LA"):
        warnings.warn(f"{path}: dropping alpha channel", stacklevel=2)
        img = img.convert("RGB" if img.mode == "RGBA" else "L")
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr / 255.0


def save_image(img: np.ndarray, path) -> None:
    """Write ``[H, W, 3]`` values in [0, 1] as an 8-bit RGB PNG (clamped, rounded half up)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"expected an [H, W, 3] image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ImageFormatError("image contains NaN or Inf")
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(Path(path), format="PNG")


def to_batch(img: np.ndarray, dtype=np.float32) -> np.ndarray:
    """``[H, W, 3]`` -> ``[1, 3, H, W]``."""
    return np.ascontiguousarray(img.transpose(2, 0, 1)[None], dtype=dtype)


def from_batch(x: np.ndarray) -> np.ndarray:
    """``[1, 3, H, W]`` -> ``[H, W, 3]`` float64."""
    return np.ascontiguousarray(x[0].transpose(1, 2, 0), dtype=np.float64)


# -- synthetic degradation -----------------------------------------------------------

@dataclass(frozen=True)
class DegradationParams:
    """Stand-in for underwater image formation.

    ``attenuation`` multiplies R, G, B (red is absorbed most in water, so the
    defaults keep red lowest); ``haze`` blends toward a blue-green veiling light.
    """

    attenuation: tuple[float, float, float] = (0.55, 0.85, 0.95)
    blur_sigma: float = 0.8
    noise_sigma: float = 0.01
    haze: float = 0.25
    veil: tuple[float, float, float] = (0.05, 0.45, 0.55)
    seed: int = 0

    @classmethod
    def identity(cls, seed: int = 0) -> "DegradationParams":
        return cls(attenuation=(1.0, 1.0, 1.0), blur_sigma=0.0, noise_sigma=0.0, haze=0.0, seed=seed)

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "DegradationParams":
        red = rng.uniform(0.35, 0.7)
        green = rng.uniform(max(red, 0.7), 0.95)
        blue = rng.uniform(max(green, 0.85), 1.0)
        return cls(
            attenuation=(red, green, blue),
            blur_sigma=float(rng.uniform(0.0, 1.2)),
            noise_sigma=float(rng.uniform(0.0, 0.02)),
            haze=float(rng.uniform(0.1, 0.4)),
            seed=int(rng.integers(2**31)),
        )


def synth_degrade(clean: np.ndarray, p: DegradationParams) -> np.ndarray:
    """Apply noise, haze, blur and channel attenuation in that order, then clamp."""
    x = np.asarray(clean, dtype=np.float64)
    if p.noise_sigma > 0:
        x = x + np.random.default_rng(p.seed).normal(0.0, p.noise_sigma, x.shape)
    if p.haze > 0:
        x = (1.0 - p.haze) * x + p.haze * np.asarray(p.veil)
    if p.blur_sigma > 0:
        x = ndimage.gaussian_filter(x, sigma=(p.blur_sigma, p.blur_sigma, 0), mode="reflect")
    x = x * np.asarray(p.attenuation)
    return np.clip(x, 0.0, 1.0)


def make_clean_scene(rng: np.random.Generator, h: int = 64, w: int = 64) -> np.ndarray:
    """Procedural textured RGB scene: smooth gradients, blobs and stripes."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.empty((h, w, 3))
    for c in range(3):
        a, b, phase = rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0, 2 * np.pi)
        img[..., c] = 0.5 + 0.25 * np.sin(2 * np.pi * (a * xx + b * yy) * rng.uniform(1, 4) + phase)
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.05, 0.25)
        mask = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r**2))
        img += mask[..., None] * rng.uniform(-0.4, 0.4, 3)
    img += 0.03 * rng.standard_normal((h, w, 3))
    return np.clip(img, 0.0, 1.0)


def synthetic_pairs(n: int, seed: int, h: int = 64, w: int = 64, scale: Optional[int] = None):
    """``n`` (degraded, clean) pairs as ``[n, 3, h, w]`` float32 arrays.

    With ``scale`` the inputs are additionally downsampled by area averaging,
    giving low-resolution degraded inputs for ``scale``-times targets.
    """
    rng = np.random.default_rng(seed)
    inputs, targets = [], []
    for _ in range(n):
        clean = make_clean_scene(rng, h, w)
        deg = synth_degrade(clean, DegradationParams.sample(rng))
        if scale:
            deg = area_downsample(deg, scale)
        inputs.append(deg.transpose(2, 0, 1))
        targets.append(clean.transpose(2, 0, 1))
    return np.stack(inputs).astype(np.float32), np.stack(targets).astype(np.float32)


def area_downsample(img: np.ndarray, s: int) -> np.ndarray:
    h, w = img.shape[0] // s, img.shape[1] // s
    return img[: h * s, : w * s].reshape(h, s, w, s, -1).mean(axis=(1, 3))


def load_pair_dirs(input_dir, target_dir, scale: Optional[int] = None):
    """Load a paired folder layout (matching file stems) into float32 batches."""
    input_dir, target_dir = Path(input_dir), Path(target_dir)
    ins = {p.stem: p for p in sorted(input_dir.glob("*.png"))}
    tgs = {p.stem: p for p in sorted(target_dir.glob("*.png"))}
    if set(ins) != set(tgs):
        diff = sorted(set(ins) ^ set(tgs))
        raise ImageFormatError(f"unpaired files between {input_dir} and {target_dir}: {', '.join(diff)}")
    if not ins:
        raise ImageFormatError(f"no PNG images in {input_dir}")
    inputs, targets = [], []
    first = None
    for stem in sorted(ins):
        x, y = load_image(ins[stem]), load_image(tgs[stem])
        expected = (x.shape[0] * (scale or 1), x.shape[1] * (scale or 1))
        if y.shape[:2] != expected:
            raise ImageFormatError(f"{stem}: target is {y.shape[0]}x{y.shape[1]}, expected {expected[0]}x{expected[1]}")
        if first is None:
            first = x.shape
        elif x.shape != first:
            raise ImageFormatError(f"{ins[stem]}: size {x.shape[:2]} differs from {first[:2]}; training pairs must share a size")
        if x.shape[0] % 8 or x.shape[1] % 8:
            raise ImageFormatError(f"{ins[stem]}: size {x.shape[0]}x{x.shape[1]} is not a multiple of 8")
        inputs.append(x.transpose(2, 0, 1))
        targets.append(y.transpose(2, 0, 1))
    return np.stack(inputs).astype(np.float32), np.stack(targets).astype(np.float32)
