"""Channel and spatial attention gates for (B, C, L) feature maps.

Channel attention squeezes time with a mean and a max, passes both descriptors
through one shared two-layer MLP (ReLU hidden layer), sums and applies a sigmoid
to get a (B, C, 1) gate.  Spatial attention squeezes channels the same way,
stacks the two (B, 1, L) maps, runs a width-7 'same' convolution and a sigmoid to
get a (B, 1, L) gate.  ``apply_cbam`` gates channels first, then time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import Conv1dParams, conv1d, init_params, linear, relu, sigmoid
from .tensor import Tensor

DEFAULT_RATIO = 8
DEFAULT_SPATIAL_KERNEL = 7


@dataclass(eq=False)
class ChannelAttentionParams:
    w1: Tensor  # (C, C // r)
    b1: Tensor  # (C // r,)
    w2: Tensor  # (C // r, C)
    b2: Tensor  # (C,)
    r: int

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def init(cls, channels: int, r: int, rng, dtype=np.float32) -> "ChannelAttentionParams":
        if r < 1 or channels % r:
            raise ConfigError(f"channel count {channels} is not divisible by reduction ratio {r}")
        hidden = channels // r

        def param(a):
            return Tensor(a, requires_grad=True)

        return cls(
            param(init_params((channels, hidden), channels, rng, dtype)),
            param(np.zeros(hidden, dtype)),
            param(init_params((hidden, channels), hidden, rng, dtype)),
            param(np.zeros(channels, dtype)),
            r,
        )

    def named_parameters(self, prefix: str):
        for name in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass(eq=False)
class SpatialAttentionParams:
    conv: Conv1dParams  # in_ch=2 (mean, max), out_ch=1

    @classmethod
    def init(cls, rng, k: int = DEFAULT_SPATIAL_KERNEL, dtype=np.float32) -> "SpatialAttentionParams":
        return cls(Conv1dParams.init(2, 1, k, rng, dtype))

    def named_parameters(self, prefix: str):
        yield from self.conv.named_parameters(prefix)


def _shared_mlp(z: Tensor, p: ChannelAttentionParams) -> Tensor:
    return linear(relu(linear(z, p.w1, p.b1)), p.w2, p.b2)


def channel_attention(F: Tensor, p: ChannelAttentionParams) -> Tensor:
    B, C, _ = F.shape
    if C != p.channels:
        raise ShapeError(f"channel attention built for {p.channels} channels, input has {C}")
    avg = T.reshape(T.reduce(F, 2, "mean"), (B, C))
    mx = T.reshape(T.reduce(F, 2, "max"), (B, C))
    gate = sigmoid(T.add(_shared_mlp(avg, p), _shared_mlp(mx, p)))
    return T.reshape(gate, (B, C, 1))


def spatial_attention(F: Tensor, p: SpatialAttentionParams) -> Tensor:
    if F.ndim != 3 or F.shape[2] < 1:
        raise ShapeError(f"spatial attention expects (B, C, L>=1), got {F.shape}")
    squeezed = T.concat([T.reduce(F, 1, "mean"), T.reduce(F, 1, "max")], axis=1)
    return sigmoid(conv1d(squeezed, p.conv))


def apply_cbam(F: Tensor, cp: ChannelAttentionParams, sp: SpatialAttentionParams) -> Tensor:
    refined = T.mul(F, channel_attention(F, cp))
    return T.mul(refined, spatial_attention(refined, sp))
