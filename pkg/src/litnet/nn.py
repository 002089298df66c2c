"""Parameter containers and the composite blocks of the network.

Blocks follow a small torch-like convention: a :class:`Module` owns its
parameters (tensors with ``requires_grad=True``) and buffers (plain arrays such
as batch-norm running statistics), discovered by attribute order so that the
registry is deterministic.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from .core import ops
from .core.tensor import ShapeError, Tensor, amax, mean, relu, sigmoid


class Module:
    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, Tensor)) or (isinstance(value, np.ndarray) and name in self._buffer_names()):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def _buffer_names(self) -> tuple:
        return getattr(self, "buffers", ())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, Tensor) and value.requires_grad:
                yield full, value

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, np.ndarray):
                yield full, value

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, value in state.items():
            if own[name].shape != value.shape:
                raise ShapeError(f"{name}: shape {value.shape} != expected {own[name].shape}")
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name, value in state.items():
            if name in params:
                params[name].data = np.array(value, dtype=params[name].dtype)
            else:
                buffers[name][...] = value

    def to(self, dtype) -> "Module":
        """Cast every parameter and buffer to ``dtype`` in place."""
        for m in self.modules():
            for name, value in list(vars(m).items()):
                if isinstance(value, Tensor):
                    value.data = value.data.astype(dtype)
                elif isinstance(value, np.ndarray) and name in m._buffer_names():
                    setattr(m, name, value.astype(dtype))
        return self


def kaiming_normal(rng: np.random.Generator, shape: tuple, slope: float = 0.25) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / ((1 + slope**2) * fan_in))
    return rng.normal(0.0, std, size=shape)


def _param(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


# -- layers -------------------------------------------------------------------

class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        shape = (cout, cin, k, k)
        self.weight = _param(np.zeros(shape) if zero else kaiming_normal(rng, shape))
        self.bias = _param(np.zeros(cout)) if bias else None
        self.k = k

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)


class BatchNorm2d(Module):
    buffers = ("running_mean", "running_var")

    def __init__(self, c: int, momentum: float = ops.BN_MOMENTUM, eps: float = ops.BN_EPS):
        self.weight = _param(np.ones(c))
        self.bias = _param(np.zeros(c))
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class PReLU(Module):
    def __init__(self, c: int, init: float = 0.25):
        self.weight = _param(np.full(c, init))

    def forward(self, x: Tensor) -> Tensor:
        return ops.prelu(x, self.weight)


class ConvBlock(Module):
    """``prelu(batchnorm(conv(x)))`` with same padding."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, zero_conv: bool = False):
        self.conv = Conv2d(cin, cout, k, rng, zero=zero_conv)
        self.bn = BatchNorm2d(cout)
        self.act = PReLU(cout)
        self.cin, self.cout = cin, cout

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise ShapeError(f"ConvBlock expects {self.cin} input channels, got {x.shape[1]}")
        return self.act(self.bn(self.conv(x)))


# -- attention ----------------------------------------------------------------

def channel_descriptor(x: Tensor) -> Tensor:
    """Two-channel (mean, max over channels) map used by the spatial gates."""
    return ops.concat_channels([mean(x, axis=1, keepdims=True), amax(x, axis=1, keepdims=True)])


class SpatialAttention(Module):
    """Gate a feature map by ``sigmoid(conv7x7([mean_c(x), max_c(x)]))``.

    Returns the gated feature, not the bare gate.
    """

    def __init__(self, rng: np.random.Generator, k: int = 7):
        self.conv = Conv2d(2, 1, k, rng)

    def gate(self, x: Tensor) -> Tensor:
        return sigmoid(self.conv(channel_descriptor(x)))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class CBAM(Module):
    """Channel attention followed by spatial attention (Woo et al., 2018).

    The channel MLP is shared between the average- and max-pooled descriptors and
    has ``max(C // ratio, 1)`` hidden units.
    """

    def __init__(self, c: int, rng: np.random.Generator, ratio: int = 4, spatial_kernel: int = 7):
        hidden = max(c // ratio, 1)
        self.fc1 = Conv2d(c, hidden, 1, rng)
        self.fc2 = Conv2d(hidden, c, 1, rng)
        self.spatial = SpatialAttention(rng, spatial_kernel)
        self.c = c

    def _mlp(self, v: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(v)))

    def channel_gate(self, x: Tensor) -> Tensor:
        avg = mean(x, axis=(2, 3), keepdims=True)
        mx = amax(x, axis=(2, 3), keepdims=True)
        return sigmoid(self._mlp(avg) + self._mlp(mx))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.c:
            raise ShapeError(f"CBAM expects {self.c} channels, got {x.shape[1]}")
        x = x * self.channel_gate(x)
        return x * self.spatial.gate(x)


# -- encoder / decoder ----------------------------------------------------------

class EncoderLayer(Module):
    """Four parallel 1x1 conv blocks, concatenated, then pixel-unshuffled by 2.

    With ``branch_channels = C // branch_divisor`` the output has
    ``16 * branch_channels`` channels at half the resolution.
    """

    def __init__(self, cin: int, branch_divisor: int, rng: np.random.Generator, branches: int = 4):
        if cin % branch_divisor:
            raise ValueError(f"encoder input width {cin} is not divisible by branch_divisor {branch_divisor}")
        cb = cin // branch_divisor
        self.branches = [ConvBlock(cin, cb, 1, rng) for _ in range(branches)]
        self.cout = 4 * branches * cb

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h % 2 or w % 2:
            raise ShapeError(f"encoder layer needs even spatial dims, got {h}x{w}")
        return ops.pixel_unshuffle(ops.concat_channels([b(x) for b in self.branches]), 2)


class DecoderLayer(Module):
    """``pixel_shuffle(concat(d_prev, S(skip)), 2)`` with ``S`` a spatial gate.

    Both inputs must share a resolution; with ``attention=False`` the skip is
    concatenated ungated.
    """

    def __init__(self, rng: Optional[np.random.Generator], attention: bool = True):
        self.attention = SpatialAttention(rng) if attention else None

    def forward(self, d_prev: Tensor, skip: Tensor) -> Tensor:
        if d_prev.shape[0] != skip.shape[0] or d_prev.shape[2:] != skip.shape[2:]:
            raise ShapeError(f"decoder inputs differ in batch/spatial size: {d_prev.shape} vs {skip.shape}")
        if (d_prev.shape[1] + skip.shape[1]) % 4:
            raise ShapeError(f"decoder concat width {d_prev.shape[1] + skip.shape[1]} is not divisible by 4")
        gated = self.attention(skip) if self.attention is not None else skip
        return ops.pixel_shuffle(ops.concat_channels([d_prev, gated]), 2)
