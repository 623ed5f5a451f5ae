"""1-D network layers on top of the autodiff engine.

Convolution is cross-correlation (no kernel flip) with zero 'same' padding and
stride 1.  Batch normalization and convolution are fused ops with hand-written
backward rules; everything else composes engine primitives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import tensor as T
from .errors import ConfigError, DegenerateStatisticsError, ShapeError
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def init_params(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """He-normal weights: zero mean, std sqrt(2 / fan_in)."""
    if fan_in < 1:
        raise ConfigError(f"fan_in must be >= 1, got {fan_in}")
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass(eq=False)
class Conv1dParams:
    weight: Tensor  # (out_ch, in_ch, k)
    bias: Tensor  # (out_ch,)

    def __post_init__(self):
        out_ch, in_ch, k = self.weight.shape
        if k % 2 == 0:
            raise ConfigError(f"conv kernel width must be odd for 'same' padding, got {k}")
        if out_ch < 1 or in_ch < 1:
            raise ConfigError(f"conv channels must be >= 1, got out={out_ch} in={in_ch}")
        if self.bias.shape != (out_ch,):
            raise ShapeError(f"conv bias shape {self.bias.shape} does not match out_ch {out_ch}")

    @classmethod
    def init(cls, in_ch: int, out_ch: int, k: int, rng, dtype=np.float32) -> "Conv1dParams":
        if k % 2 == 0:
            raise ConfigError(f"conv kernel width must be odd for 'same' padding, got {k}")
        w = init_params((out_ch, in_ch, k), in_ch * k, rng, dtype)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(out_ch, dtype), requires_grad=True))

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    @property
    def in_ch(self) -> int:
        return self.weight.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weight.shape[0]

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass(eq=False)
class BatchNorm1dParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigError(f"batchnorm eps must be positive, got {self.eps}")
        if not 0 < self.momentum < 1:
            raise ConfigError(f"batchnorm momentum must lie in (0, 1), got {self.momentum}")

    @classmethod
    def init(cls, channels: int, dtype=np.float32) -> "BatchNorm1dParams":
        return cls(
            Tensor(np.ones(channels, dtype), requires_grad=True),
            Tensor(np.zeros(channels, dtype), requires_grad=True),
            np.zeros(channels, dtype),
            np.ones(channels, dtype),
        )

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


def conv1d(x: Tensor, p: Conv1dParams) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects (B, C, L), got {x.shape}")
    B, C, L = x.shape
    if C != p.in_ch:
        raise ShapeError(f"conv1d input has {C} channels, kernel expects {p.in_ch}")
    if L < 1:
        raise ShapeError("conv1d needs L >= 1")
    k, pad = p.k, p.k // 2
    w, b = p.weight.data, p.bias.data
    xp = np.zeros((B, C, L + 2 * pad), x.dtype)
    xp[:, :, pad : pad + L] = x.data
    # (B, C, k, L) read-only window view -> (B, C*k, L) columns, channel-major like the output
    s0, s1, s2 = xp.strides
    cols = as_strided(xp, (B, C, k, L), (s0, s1, s2, s2), writeable=False).reshape(B, C * k, L)
    w2 = w.reshape(p.out_ch, C * k)
    out = np.matmul(w2, cols)
    out += b[None, :, None]

    def rule(g):
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g).reshape(B, C, k, L)
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[:, :, j : j + L] += dcols[:, :, j, :]
            gx = dxp[:, :, pad : pad + L]
        if p.weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if p.bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return gx, gw, gb

    return T.record("conv1d", out, (x, p.weight, p.bias), rule)


def batchnorm1d(x: Tensor, p: BatchNorm1dParams, mode: str = "train") -> Tensor:
    """Per-channel normalization over batch and time.

    Train mode uses batch statistics and updates the running estimates in place
    (running variance uses the unbiased batch variance); eval mode uses the
    running estimates.
    """
    if x.ndim != 3:
        raise ShapeError(f"batchnorm1d expects (B, C, L), got {x.shape}")
    B, C, L = x.shape
    if C != p.gamma.shape[0]:
        raise ShapeError(f"batchnorm1d input has {C} channels, parameters have {p.gamma.shape[0]}")
    xd = x.data
    gamma = p.gamma.data[None, :, None]
    beta = p.beta.data[None, :, None]
    eps = xd.dtype.type(p.eps)

    if mode == "eval":
        inv = 1.0 / np.sqrt(p.running_var.astype(xd.dtype) + eps)
        shift = p.running_mean.astype(xd.dtype)
        xhat = (xd - shift[None, :, None]) * inv[None, :, None]

        def rule_eval(g):
            return (
                g * gamma * inv[None, :, None] if x.requires_grad else None,
                (g * xhat).sum(axis=(0, 2)),
                g.sum(axis=(0, 2)),
            )

        return T.record("batchnorm1d", xhat * gamma + beta, (x, p.gamma, p.beta), rule_eval)
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")

    n = B * L
    if n < 2:
        raise DegenerateStatisticsError("batchnorm1d in train mode needs B*L >= 2 values per channel")
    mean = xd.mean(axis=(0, 2), keepdims=True)
    centered = xd - mean
    var = (centered**2).mean(axis=(0, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    m = p.momentum
    p.running_mean[:] = (1 - m) * p.running_mean + m * mean.reshape(C)
    p.running_var[:] = (1 - m) * p.running_var + m * var.reshape(C) * (n / (n - 1))

    def rule(g):
        dgamma = (g * xhat).sum(axis=(0, 2))
        dbeta = g.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            dxhat = g * gamma
            gx = (inv / n) * (
                n * dxhat - dxhat.sum(axis=(0, 2), keepdims=True) - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
            )
        return gx, dgamma, dbeta

    return T.record("batchnorm1d", xhat * gamma + beta, (x, p.gamma, p.beta), rule)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd > 0
    T.note_branch(pos)
    return T.record("relu", np.where(pos, xd, 0).astype(xd.dtype), (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    xd = x.data
    nonneg = xd >= 0
    T.note_branch(nonneg)
    factor = np.where(nonneg, 1, slope).astype(xd.dtype)
    return T.record("leaky_relu", xd * factor, (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype)
    return T.record("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def activation(x: Tensor, kind: str, slope: float = 0.1) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def avg_pool1d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping mean pooling; a trailing remainder shorter than ``k`` is dropped."""
    if k < 1:
        raise ConfigError(f"pool width must be >= 1, got {k}")
    B, C, L = x.shape
    if L < k:
        raise ShapeError(f"avg_pool1d needs L >= k, got L={L}, k={k}")
    n = L // k
    xd = x.data
    out = xd[:, :, : n * k].reshape(B, C, n, k).mean(axis=3)
    inv = xd.dtype.type(1.0 / k)

    def rule(g):
        gx = np.zeros_like(xd)
        gx[:, :, : n * k] = np.repeat(g * inv, k, axis=2)
        return (gx,)

    return T.record("avg_pool1d", out, (x,), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 3 or x.shape[2] < 1:
        raise ShapeError(f"global_avg_pool expects (B, C, L>=1), got {x.shape}")
    return T.reduce(x, 2, "mean")


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval mode is the identity."""
    if not 0 <= p < 1:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if mode == "eval" or p == 0:
        return x
    keep = rng.random(x.shape) >= p
    mask = Tensor((keep / (1 - p)).astype(x.dtype))
    return T.mul(x, mask)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return T.add(T.matmul(x, weight), bias)
