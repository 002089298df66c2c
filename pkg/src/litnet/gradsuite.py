"""Finite-difference checks over every differentiable op, block and the full model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import losses, nn
from .core import ops
from .core import tensor as T
from .core.gradcheck import GradCheckResult, grad_check
from .model import LitNet, ModelConfig

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckOutcome:
    name: str
    result: GradCheckResult
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.result.passed(self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        r = self.result
        return f"{status}  {self.name:<28} max_rel_err={r.max_rel_error:.3e} (tol {self.tol:g}) at {r.location}  [{r.n_checked} entries, {r.n_kinks} kinks, {self.seconds:.1f}s]"


def _leaf(rng: np.random.Generator, shape, name: str, low: float = None) -> T.Tensor:
    data = rng.standard_normal(shape)
    if low is not None:
        data = low + np.abs(data)
    return T.Tensor(data, requires_grad=True, name=name)


def _module_check(module: nn.Module, inputs: list[T.Tensor], fn=None, **kw) -> GradCheckResult:
    module.to(np.float64)
    params = list(module.named_parameters())
    leaves = inputs + [p for _, p in params]
    names = [t.name for t in inputs] + [n for n, _ in params]
    k = len(inputs)
    call = fn or (lambda *xs: module(*xs))
    return grad_check(lambda *a: call(*a[:k]), leaves, names=names, **kw)


def _cases(full: bool) -> Iterator[tuple[str, float, Callable[[], GradCheckResult]]]:
    entries = None if full else 24
    rng = np.random.default_rng(0)
    L = lambda shape, name, low=None: _leaf(rng, shape, name, low)
    P = dict(max_entries=entries)

    # elementwise and reductions
    yield "add (broadcast)", PRIMITIVE_TOL, lambda: grad_check(lambda a, b: a + b, [L((2, 3, 4, 4), "a"), L((1, 3, 1, 1), "b")], **P)
    yield "mul (broadcast)", PRIMITIVE_TOL, lambda: grad_check(lambda a, b: a * b, [L((2, 3, 4, 4), "a"), L((2, 1, 4, 4), "b")], **P)
    yield "sub", PRIMITIVE_TOL, lambda: grad_check(lambda a, b: a - b, [L((2, 3), "a"), L((2, 3), "b")], **P)
    yield "div", PRIMITIVE_TOL, lambda: grad_check(lambda a, b: a / b, [L((2, 3), "a"), L((2, 3), "b", low=0.5)], **P)
    yield "scale", PRIMITIVE_TOL, lambda: grad_check(lambda a: T.scale(a, -1.7), [L((3, 4), "a")], **P)
    yield "power", PRIMITIVE_TOL, lambda: grad_check(lambda a: T.power(a, 1.5), [L((3, 4), "a", low=0.5)], **P)
    yield "abs", PRIMITIVE_TOL, lambda: grad_check(T.abs_, [L((3, 4), "a")], **P)
    yield "sum (axes)", PRIMITIVE_TOL, lambda: grad_check(lambda a: T.sum_(a, axis=(0, 2)), [L((2, 3, 4), "a")], **P)
    yield "mean (keepdims)", PRIMITIVE_TOL, lambda: grad_check(lambda a: T.mean(a, axis=1, keepdims=True), [L((2, 3, 4), "a")], **P)
    yield "amax", PRIMITIVE_TOL, lambda: grad_check(lambda a: T.amax(a, axis=(2, 3), keepdims=True), [L((2, 3, 4, 4), "a")], **P)
    yield "relu", PRIMITIVE_TOL, lambda: grad_check(T.relu, [L((2, 3, 4), "a")], **P)
    yield "sigmoid", PRIMITIVE_TOL, lambda: grad_check(T.sigmoid, [L((2, 3, 4), "a")], **P)
    yield "reshape + index", PRIMITIVE_TOL, lambda: grad_check(lambda a: a.reshape(4, 6)[1:3], [L((2, 3, 4), "a")], **P)

    # image primitives
    for k in (1, 3, 5):
        yield f"conv2d k={k}", PRIMITIVE_TOL, lambda k=k: grad_check(
            ops.conv2d, [L((1, 2, 5, 5), "x"), L((3, 2, k, k), "weight"), L((3,), "bias")], **P)
    yield "batchnorm2d train", PRIMITIVE_TOL, lambda: grad_check(
        lambda x, g, b: ops.batchnorm2d(x, g, b, np.zeros(3), np.ones(3), True),
        [L((2, 3, 4, 4), "x"), L((3,), "gamma"), L((3,), "beta")], **P)
    yield "batchnorm2d eval", PRIMITIVE_TOL, lambda: grad_check(
        lambda x, g, b: ops.batchnorm2d(x, g, b, np.full(3, 0.3), np.full(3, 2.0), False),
        [L((2, 3, 4, 4), "x"), L((3,), "gamma"), L((3,), "beta")], **P)
    yield "prelu", PRIMITIVE_TOL, lambda: grad_check(ops.prelu, [L((2, 3, 4, 4), "x"), L((3,), "alpha")], **P)
    for r in (2, 3):
        yield f"pixel_shuffle r={r}", PRIMITIVE_TOL, lambda r=r: grad_check(
            lambda x: ops.pixel_shuffle(x, r), [L((1, 2 * r * r, 3, 3), "x")], **P)
        yield f"pixel_unshuffle r={r}", PRIMITIVE_TOL, lambda r=r: grad_check(
            lambda x: ops.pixel_unshuffle(x, r), [L((1, 2, 2 * r, 2 * r), "x")], **P)
    yield "concat_channels", PRIMITIVE_TOL, lambda: grad_check(
        lambda a, b: ops.concat_channels([a, b]), [L((1, 2, 4, 4), "a"), L((1, 3, 4, 4), "b")], **P)
    yield "avg_pool2d", PRIMITIVE_TOL, lambda: grad_check(lambda x: ops.avg_pool2d(x, 2), [L((1, 2, 4, 6), "x")], **P)
    yield "separable_filter", PRIMITIVE_TOL, lambda: grad_check(
        lambda x: ops.separable_filter(x, losses.gaussian_taps(5, 1.0)), [L((1, 2, 8, 8), "x")], **P)
    yield "bicubic_upsample s=3", PRIMITIVE_TOL, lambda: grad_check(
        lambda x: ops.bicubic_upsample(x, 3), [L((1, 2, 4, 5), "x")], **P)

    # blocks
    brng = lambda: np.random.default_rng(1)
    yield "ConvBlock k=3", PRIMITIVE_TOL, lambda: _module_check(nn.ConvBlock(2, 3, 3, brng()), [L((2, 2, 5, 5), "x")], **P)
    yield "SpatialAttention", PRIMITIVE_TOL, lambda: _module_check(nn.SpatialAttention(brng()), [L((1, 3, 8, 8), "x")], **P)
    yield "CBAM", PRIMITIVE_TOL, lambda: _module_check(nn.CBAM(8, brng(), ratio=4), [L((2, 8, 8, 8), "x")], **P)
    yield "EncoderLayer", PRIMITIVE_TOL, lambda: _module_check(nn.EncoderLayer(8, 8, brng()), [L((2, 8, 4, 4), "x")], **P)
    yield "DecoderLayer", PRIMITIVE_TOL, lambda: _module_check(
        nn.DecoderLayer(brng()), [L((1, 4, 4, 4), "d_prev"), L((1, 4, 4, 4), "skip")], **P)

    # losses
    target = rng.random((2, 3, 12, 12))
    cfg = losses.LossConfig()
    img = lambda: T.Tensor(rng.random((2, 3, 12, 12)), requires_grad=True, name="pred")
    yield "cl1_loss", PRIMITIVE_TOL, lambda: grad_check(lambda p: losses.cl1_loss(p, target, cfg), [img()], **P)
    yield "ssim_loss", PRIMITIVE_TOL, lambda: grad_check(lambda p: losses.ssim_loss(p, target, cfg), [img()], **P)
    yield "perceptual_loss", PRIMITIVE_TOL, lambda: grad_check(lambda p: losses.perceptual_loss(p, target), [img()], **P)

    # full model at toy width
    scales = (None, 2, 3, 4) if full else (None, 2)
    for s in scales:
        label = "LitNet enhance" if s is None else f"LitNet superres x{s}"
        yield label, MODEL_TOL, lambda s=s: _model_check(s, 12 if full else 4)


def _model_check(scale, entries: int) -> GradCheckResult:
    mode = "enhance" if scale is None else "superres"
    model = LitNet(ModelConfig(base_width=4, fc_width=8, mode=mode, scale=scale), seed=0).to(np.float64)
    rng = np.random.default_rng(2)
    # a zero head would hide every upstream gradient
    model.head.conv.weight.data = rng.normal(0.0, 0.1, model.head.conv.weight.shape)
    x = T.Tensor(rng.random((1, 3, 16, 16)), requires_grad=True, name="x")
    params = list(model.named_parameters())
    return grad_check(
        lambda x, *_: model(x), [x] + [p for _, p in params],
        names=["x"] + [n for n, _ in params], eps=1e-5, max_entries=entries,
    )


def run_suite(full: bool = False) -> list[CheckOutcome]:
    outcomes = []
    for name, tol, check in _cases(full):
        t0 = time.perf_counter()
        result = check()
        outcomes.append(CheckOutcome(name, result, tol, time.perf_counter() - t0))
    return outcomes
