"""Differentiable image operations on NCHW tensors."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, active_tape, add_flops, make_output

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D NCHW tensor, got shape {x.shape}")


# -- convolution --------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """Rows are output pixels in (n, y, x) order, columns are (ky, kx, c).

    Gathering from a channels-last copy keeps every copied run contiguous.
    """
    n, c = xp.shape[:2]
    xh = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    win = sliding_window_view(xh, (k, k), axis=(1, 2))  # n, h, w, c, k, k
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


_CHUNK_ELEMENTS = 1 << 24  # im2col budget when the buffer need not be kept


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    cout = w.shape[0]
    return w.transpose(0, 2, 3, 1).reshape(cout, -1).T


def _correlate(x: np.ndarray, w: np.ndarray, pad: int, keep_cols: bool = True):
    """Same-size cross-correlation; returns NCHW output and the im2col buffer.

    With ``keep_cols=False`` the work is split into row bands so that peak
    memory stays bounded, and ``None`` is returned in place of the buffer.
    """
    n, c, h, wd = x.shape
    cout, _, k, _ = w.shape
    w2 = _weight_matrix(w)
    if k == 1:
        cols = x.transpose(0, 2, 3, 1).reshape(n * h * wd, c)
        out = (cols @ w2).reshape(n, h, wd, cout)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cols
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    band = h if keep_cols else max(1, min(h, _CHUNK_ELEMENTS // max(n * wd * c * k * k, 1)))
    if band == h:
        cols = _im2col(xp, k, h, wd)
        out = (cols @ w2).reshape(n, h, wd, cout)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), (cols if keep_cols else None)
    out = np.empty((n, cout, h, wd), dtype=np.result_type(x, w))
    for y0 in range(0, h, band):
        y1 = min(h, y0 + band)
        cols = _im2col(xp[:, :, y0 : y1 + k - 1], k, y1 - y0, wd)
        out[:, :, y0:y1] = (cols @ w2).reshape(n, y1 - y0, wd, cout).transpose(0, 3, 1, 2)
    return out, None


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: Optional[int] = None) -> Tensor:
    """2-D cross-correlation with zero "same" padding.

    ``weight`` is ``[Cout, Cin, k, k]`` with odd ``k``; ``padding`` defaults to
    ``(k - 1) // 2`` and no other value is accepted.
    """
    _require_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be [Cout, Cin, k, k], got {weight.shape}")
    cout, cin, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {k}x{k2} (dims 2, 3)")
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    pad = (k - 1) // 2
    if padding is not None and padding != pad:
        raise ShapeError(f"conv2d: only same padding ({pad}) is supported for k={k}, got {padding}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d: input channels (dim 1) = {x.shape[1]} but weight expects Cin = {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match Cout = {cout}")

    n, _, h, w = x.shape
    need_grad = active_tape() is not None and (x.requires_grad or weight.requires_grad)
    out, cols = _correlate(x.data, weight.data, pad, keep_cols=need_grad)
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)
    macs = n * h * w * cout * cin * k * k
    add_flops(2 * macs + (out.size if bias is not None else 0))

    def backward(g):
        g = np.ascontiguousarray(g)  # broadcast (zero-stride) grads bypass BLAS
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gw = None
        if weight.requires_grad:
            gw = (g_mat.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3)) if (bias is not None and bias.requires_grad) else None
        gx = None
        if x.requires_grad:
            flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx, _ = _correlate(g, np.ascontiguousarray(flipped), pad, keep_cols=False)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_output(out, inputs, backward)


# -- normalisation and activation --------------------------------------------

def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics (biased variance) normalise the input
    and the running buffers are updated in place with the unbiased variance.
    Evaluation mode uses the running buffers only.
    """
    _require_4d(x, "batchnorm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: affine params {gamma.shape}/{beta.shape} do not match C = {c}")
    shape = (1, c, 1, 1)
    add_flops(4 * x.size)

    if not training:
        inv = 1.0 / np.sqrt(running_var.astype(x.dtype) + x.dtype.type(eps))
        xhat = (x.data - running_mean.astype(x.dtype).reshape(shape)) * inv.reshape(shape)
        out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

        def backward_eval(g):
            gx = g * (gamma.data * inv).reshape(shape) if x.requires_grad else None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_output(out.astype(x.dtype, copy=False), (x, gamma, beta), backward_eval)

    m = n * h * w
    if m < 2:
        raise ShapeError("batchnorm2d: training mode needs at least 2 values per channel (N*H*W >= 2)")
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    running_mean *= 1 - momentum
    running_mean += momentum * mu
    running_var *= 1 - momentum
    running_var += momentum * var * (m / (m - 1))

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shape)
            gx = (inv.reshape(shape) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        return gx, ggamma, gbeta

    return make_output(out, (x, gamma, beta), backward)


def prelu(x: Tensor, alpha: Tensor) -> Tensor:
    """Parametric ReLU with one slope per channel (or a single shared slope)."""
    if x.ndim < 2:
        raise ShapeError(f"prelu: expected at least 2-D input, got {x.shape}")
    c = x.shape[1]
    if alpha.shape not in ((c,), (1,)):
        raise ShapeError(f"prelu: alpha shape {alpha.shape} must be ({c},) or (1,)")
    shape = (1, alpha.shape[0]) + (1,) * (x.ndim - 2)
    a = alpha.data.reshape(shape)
    neg = x.data < 0
    out = np.where(neg, a * x.data, x.data)
    axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gx = g * np.where(neg, a, 1).astype(x.dtype) if x.requires_grad else None
        ga = None
        if alpha.requires_grad:
            ga = (g * x.data * neg).sum(axis=axes)
            if alpha.shape == (1,):
                ga = np.atleast_1d(ga.sum())
        return gx, ga

    return make_output(out, (x, alpha), backward, flops=out.size)


# -- rearrangements -----------------------------------------------------------

def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: ``[N, C*r*r, H, W] -> [N, C, H*r, W*r]``.

    Output pixel ``(h*r + i, w*r + j)`` of channel ``c`` is read from input
    channel ``c*r*r + i*r + j``.
    """
    _require_4d(x, "pixel_shuffle")
    n, cr, h, w = x.shape
    if r < 1 or cr % (r * r):
        raise ShapeError(f"pixel_shuffle: channel count {cr} is not divisible by r^2 = {r * r}")
    c = cr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def backward(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)

    return make_output(out, (x,), backward)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Space-to-depth, the exact inverse of :func:`pixel_shuffle`."""
    _require_4d(x, "pixel_unshuffle")
    n, c, h, w = x.shape
    if r < 1 or h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: spatial size {h}x{w} is not divisible by r = {r}")
    hh, ww = h // r, w // r
    out = x.data.reshape(n, c, hh, r, ww, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, hh, ww)

    def backward(g):
        return (g.reshape(n, c, r, r, hh, ww).transpose(0, 1, 4, 2, 5, 3).reshape(x.shape),)

    return make_output(out, (x,), backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_channels: need at least one tensor")
    first = tensors[0]
    for t in tensors:
        _require_4d(t, "concat_channels")
        if (t.shape[0],) + t.shape[2:] != (first.shape[0],) + first.shape[2:]:
            raise ShapeError(f"concat_channels: {first.shape} and {t.shape} differ outside the channel axis")
    if len(tensors) == 1:
        return first
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_output(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), backward)


def avg_pool2d(x: Tensor, r: int = 2) -> Tensor:
    _require_4d(x, "avg_pool2d")
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"avg_pool2d: spatial size {h}x{w} is not divisible by {r}")
    out = x.data.reshape(n, c, h // r, r, w // r, r).mean(axis=(3, 5))

    def backward(g):
        up = np.repeat(np.repeat(g, r, axis=2), r, axis=3)
        return (up / (r * r),)

    return make_output(out.astype(x.dtype, copy=False), (x,), backward, flops=x.size)


def separable_filter(x: Tensor, taps: np.ndarray) -> Tensor:
    """Depthwise 'valid' filtering with the outer product of ``taps`` with itself.

    Each channel is correlated independently; the output loses ``len(taps) - 1``
    rows and columns.
    """
    _require_4d(x, "separable_filter")
    taps = np.asarray(taps, dtype=x.dtype)
    k = taps.size
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"separable_filter: image {x.shape[2]}x{x.shape[3]} is smaller than the {k}x{k} window")

    def run(a, t):
        a = sliding_window_view(a, k, axis=2) @ t
        return sliding_window_view(a, k, axis=3) @ t

    out = run(x.data, taps)

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        return (run(gp, taps[::-1].copy()),)

    return make_output(out, (x,), backward, flops=4 * k * out.size)


# -- resampling ---------------------------------------------------------------

def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel."""
    t = np.abs(t)
    return np.where(
        t <= 1,
        (a + 2) * t**3 - (a + 3) * t**2 + 1,
        np.where(t < 2, a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a, 0.0),
    )


def bicubic_matrix(n_in: int, s: int, a: float = -0.5) -> np.ndarray:
    """Row-stochastic ``[n_in*s, n_in]`` resampling matrix (half-pixel centres, clamped edges)."""
    n_out = n_in * s
    src = (np.arange(n_out) + 0.5) / s - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for offset in (-1, 0, 1, 2):
        idx = np.clip(base + offset, 0, n_in - 1)
        np.add.at(m, (rows, idx), cubic_kernel(frac - offset, a))
    return m


def bicubic_upsample(x: Tensor, s: int) -> Tensor:
    """Upsample by an integer factor with the Keys cubic kernel (a = -0.5).

    The resampling is linear, so the gradient is the transposed resampling.
    Arithmetic is carried out in float64 and cast back to the input dtype.
    """
    _require_4d(x, "bicubic_upsample")
    if s < 1:
        raise ShapeError(f"bicubic_upsample: scale must be >= 1, got {s}")
    _, _, h, w = x.shape
    mh, mw = bicubic_matrix(h, s), bicubic_matrix(w, s)
    out = np.einsum("ih,nchw,jw->ncij", mh, x.data.astype(np.float64), mw, optimize=True)

    def backward(g):
        gx = np.einsum("ih,ncij,jw->nchw", mh, g.astype(np.float64), mw, optimize=True)
        return (gx.astype(x.dtype),)

    return make_output(out.astype(x.dtype), (x,), backward, flops=8 * out.size if s > 1 else 0)
