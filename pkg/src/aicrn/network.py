"""The attention-integrated convolutional residual network and its checkpoint format.

Pipeline: two conv -> batchnorm -> LeakyReLU stem stages, average pooling (k=2),
``num_blocks`` residual modules of constant width, dropout, global average
pooling and a linear head emitting one value per record.

Each residual module computes::

    branch = bn_b(conv_b(leaky(bn_a(conv_a(x)))))
    branch = cbam(branch)            # when attention is on
    out    = leaky(x + branch)       # post-addition activation is configurable
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .cbam import ChannelAttentionParams, SpatialAttentionParams, apply_cbam
from .errors import ConfigError, CorruptCheckpointError, ShapeError
from .layers import (
    BatchNorm1dParams,
    Conv1dParams,
    avg_pool1d,
    batchnorm1d,
    conv1d,
    dropout,
    global_avg_pool,
    init_params,
    leaky_relu,
    linear,
)
from .tensor import Tensor

MAGIC = b"AICN"
VERSION = 1


@dataclass(frozen=True)
class AicrnConfig:
    in_channels: int = 8
    input_len: int = 1000
    stem_width: int = 64
    stem_kernel: int = 15
    block_kernel: int = 7
    num_blocks: int = 8
    attention: bool = True
    cbam_ratio: int = 8
    spatial_kernel: int = 7
    pool_kernel: int = 2
    dropout_p: float = 0.5
    out_size: int = 1
    leaky_slope: float = 0.1
    post_activation: bool = True

    def validate(self) -> "AicrnConfig":
        bad = []
        for name in ("stem_kernel", "block_kernel", "spatial_kernel"):
            if getattr(self, name) < 1 or getattr(self, name) % 2 == 0:
                bad.append(f"{name}={getattr(self, name)} (must be odd)")
        if self.num_blocks < 1:
            bad.append(f"num_blocks={self.num_blocks} (must be >= 1)")
        if not 0 <= self.dropout_p < 1:
            bad.append(f"dropout_p={self.dropout_p} (must be in [0, 1))")
        if self.out_size != 1:
            bad.append(f"out_size={self.out_size} (must be 1)")
        if self.in_channels < 1 or self.stem_width < 1:
            bad.append("in_channels and stem_width must be >= 1")
        if self.pool_kernel < 1 or self.input_len < self.pool_kernel:
            bad.append(f"pool_kernel={self.pool_kernel} with input_len={self.input_len}")
        if self.attention and (self.cbam_ratio < 1 or self.stem_width % self.cbam_ratio):
            bad.append(f"cbam_ratio={self.cbam_ratio} (must divide stem_width={self.stem_width})")
        if bad:
            raise ConfigError("invalid AicrnConfig: " + "; ".join(bad))
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "AicrnConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown AicrnConfig fields: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass(eq=False)
class ResidualAttentionModule:
    conv_a: Conv1dParams
    bn_a: BatchNorm1dParams
    conv_b: Conv1dParams
    bn_b: BatchNorm1dParams
    channel: ChannelAttentionParams | None = None
    spatial: SpatialAttentionParams | None = None

    @property
    def width(self) -> int:
        return self.conv_a.in_ch

    def named_parameters(self, prefix: str):
        yield from self.conv_a.named_parameters(f"{prefix}.conv_a")
        yield from self.bn_a.named_parameters(f"{prefix}.bn_a")
        yield from self.conv_b.named_parameters(f"{prefix}.conv_b")
        yield from self.bn_b.named_parameters(f"{prefix}.bn_b")
        if self.channel is not None:
            yield from self.channel.named_parameters(f"{prefix}.cbam.channel")
            yield from self.spatial.named_parameters(f"{prefix}.cbam.spatial")

    def named_buffers(self, prefix: str):
        yield from self.bn_a.named_buffers(f"{prefix}.bn_a")
        yield from self.bn_b.named_buffers(f"{prefix}.bn_b")


@dataclass(eq=False)
class AicrnModel:
    config: AicrnConfig
    stem_conv1: Conv1dParams
    stem_bn1: BatchNorm1dParams
    stem_conv2: Conv1dParams
    stem_bn2: BatchNorm1dParams
    blocks: list[ResidualAttentionModule]
    head_weight: Tensor  # (width, 1)
    head_bias: Tensor  # (1,)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.stem_conv1.named_parameters("stem.conv1")
        yield from self.stem_bn1.named_parameters("stem.bn1")
        yield from self.stem_conv2.named_parameters("stem.conv2")
        yield from self.stem_bn2.named_parameters("stem.bn2")
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"blocks.{i}")
        yield "head.weight", self.head_weight
        yield "head.bias", self.head_bias

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self.stem_bn1.named_buffers("stem.bn1")
        yield from self.stem_bn2.named_buffers("stem.bn2")
        for i, block in enumerate(self.blocks):
            yield from block.named_buffers(f"blocks.{i}")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every persisted array (parameters, then batchnorm running statistics)."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        if set(own) != set(arrays):
            missing = sorted(set(own) - set(arrays))
            extra = sorted(set(arrays) - set(own))
            raise ShapeError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, target in own.items():
            src = arrays[name]
            if src.shape != target.shape:
                raise ShapeError(f"{name}: shape {src.shape} != expected {target.shape}")
            target[...] = src

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None


def build(config: AicrnConfig, rng: np.random.Generator, dtype=np.float32) -> AicrnModel:
    config.validate()
    c = config
    w = c.stem_width
    blocks = []
    stem_conv1 = Conv1dParams.init(c.in_channels, w, c.stem_kernel, rng, dtype)
    stem_conv2 = Conv1dParams.init(w, w, c.stem_kernel, rng, dtype)
    for _ in range(c.num_blocks):
        block = ResidualAttentionModule(
            Conv1dParams.init(w, w, c.block_kernel, rng, dtype),
            BatchNorm1dParams.init(w, dtype),
            Conv1dParams.init(w, w, c.block_kernel, rng, dtype),
            BatchNorm1dParams.init(w, dtype),
        )
        if c.attention:
            block.channel = ChannelAttentionParams.init(w, c.cbam_ratio, rng, dtype)
            block.spatial = SpatialAttentionParams.init(rng, c.spatial_kernel, dtype)
        blocks.append(block)
    head_w = Tensor(init_params((w, c.out_size), w, rng, dtype), requires_grad=True)
    head_b = Tensor(np.zeros(c.out_size, dtype), requires_grad=True)
    return AicrnModel(
        c,
        stem_conv1,
        BatchNorm1dParams.init(w, dtype),
        stem_conv2,
        BatchNorm1dParams.init(w, dtype),
        blocks,
        head_w,
        head_b,
    )


def residual_forward(
    x: Tensor, m: ResidualAttentionModule, mode: str, slope: float = 0.1, post_activation: bool = True
) -> Tensor:
    if x.ndim != 3 or x.shape[1] != m.width:
        raise ShapeError(f"residual module of width {m.width} got input {x.shape}")
    branch = leaky_relu(batchnorm1d(conv1d(x, m.conv_a), m.bn_a, mode), slope)
    branch = batchnorm1d(conv1d(branch, m.conv_b), m.bn_b, mode)
    if m.channel is not None:
        branch = apply_cbam(branch, m.channel, m.spatial)
    out = T.add(x, branch)
    return leaky_relu(out, slope) if post_activation else out


def features(model: AicrnModel, x: Tensor, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Everything up to and including global pooling: (B, width)."""
    c = model.config
    if x.ndim != 3 or x.shape[1:] != (c.in_channels, c.input_len):
        raise ShapeError(f"expected input (B, {c.in_channels}, {c.input_len}), got {x.shape}")
    h = leaky_relu(batchnorm1d(conv1d(x, model.stem_conv1), model.stem_bn1, mode), c.leaky_slope)
    h = leaky_relu(batchnorm1d(conv1d(h, model.stem_conv2), model.stem_bn2, mode), c.leaky_slope)
    h = avg_pool1d(h, c.pool_kernel)
    for block in model.blocks:
        h = residual_forward(h, block, mode, c.leaky_slope, c.post_activation)
    if mode == "train" and c.dropout_p > 0 and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")
    h = dropout(h, c.dropout_p, mode, rng)
    return T.reshape(global_avg_pool(h), (x.shape[0], c.stem_width))


def forward(model: AicrnModel, x: Tensor, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    """Regression output of shape (B, 1)."""
    return linear(features(model, x, mode, rng), model.head_weight, model.head_bias)


def predict(model: AicrnModel, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode predictions for an (N, C, L) array, as a flat float64 vector."""
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(forward(model, Tensor(x[i : i + batch_size]), "eval").data[:, 0])
    return np.concatenate(out).astype(np.float64) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# checkpoint format: "AICN" | u32 version | u32 count | tensors | u32 len | JSON config
# tensor: u16 name_len | name | u8 rank | u32 dims[rank] | float32 data (little-endian)


def save_weights(model: AicrnModel, path) -> Path:
    path = Path(path)
    arrays = model.state_arrays()
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(f"truncated checkpoint at byte {self.pos} (need {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Decode a checkpoint into its named arrays and config dict."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CorruptCheckpointError("bad magic bytes; not an AICN checkpoint")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"undecodable tensor name: {exc}") from None
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    (blob_len,) = r.unpack("<I")
    try:
        config = json.loads(r.take(blob_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"bad config blob: {exc}") from None
    if r.pos != len(r.buf):
        raise CorruptCheckpointError(f"{len(r.buf) - r.pos} trailing bytes after config blob")
    return arrays, config


def load_weights(path, expect: AicrnConfig | None = None) -> AicrnModel:
    """Rebuild a float32 model from a checkpoint.

    With ``expect`` the model is laid out from that config instead of the stored
    one, so a checkpoint of a different architecture fails on shape disagreement.
    """
    arrays, stored = read_checkpoint(path)
    try:
        config = AicrnConfig.from_dict(stored)
    except (ConfigError, TypeError) as exc:
        raise CorruptCheckpointError(f"invalid embedded config: {exc}") from None
    model = build(expect or config, np.random.default_rng(0))
    try:
        model.load_state_arrays(arrays)
    except ShapeError as exc:
        raise CorruptCheckpointError(f"shape disagreement: {exc}") from None
    return model


def meta_path(checkpoint) -> Path:
    p = Path(checkpoint)
    return p.with_name(p.stem + ".meta.json")
