"""Loss, Nadam, metrics, early stopping and the epoch loop."""

from __future__ import annotations

import copy
import csv
import enum
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import TARGETS, Dataset, batches
from .errors import ConfigError, R2UndefinedError, ShapeError, TrainingError
from .network import AicrnModel, forward, load_weights, predict, save_weights
from .tensor import Tensor

log = logging.getLogger(__name__)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    if pred.data.size < 1:
        raise ShapeError("mse_loss needs at least one element")
    diff = T.sub(pred, target)
    return T.reduce(T.mul(diff, diff), None, "mean")


# ---------------------------------------------------------------------------
# Nadam


@dataclass
class NadamState:
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def nadam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], s: NadamState) -> None:
    """One Nadam update applied in place to ``params``.

    Per parameter, after t <- t + 1::

        m  = b1 m + (1 - b1) g          v  = b2 v + (1 - b2) g^2
        mh = m / (1 - b1^(t+1))         gh = g / (1 - b1^t)       vh = v / (1 - b2^t)
        theta -= lr (b1 mh + (1 - b1) gh) / (sqrt(vh) + eps)
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r} at step {s.t + 1}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    s.t += 1
    b1, b2, t = s.beta1, s.beta2, s.t
    m_corr = 1 - b1 ** (t + 1)
    g_corr = 1 - b1**t
    v_corr = 1 - b2**t
    for name, g in grads.items():
        p = params[name]
        m = s.m.get(name)
        if m is None:
            m = s.m[name] = np.zeros_like(p.data)
            s.v[name] = np.zeros_like(p.data)
        v = s.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = (b1 * (m / m_corr) + (1 - b1) * (g / g_corr)) / (np.sqrt(v / v_corr) + s.eps)
        p.data -= (s.lr * step).astype(p.dtype)


# ---------------------------------------------------------------------------
# metrics


def compute_metrics(pred: Sequence[float], target: Sequence[float]) -> dict[str, float]:
    """MAE, RMSE and R^2.  Raises :class:`R2UndefinedError` (carrying MAE/RMSE) for constant targets."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.shape != t.shape or p.size == 0:
        raise ShapeError(f"metrics need equal nonzero lengths, got {p.size} and {t.size}")
    err = p - t
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    ss_tot = float(np.sum((t - np.mean(t)) ** 2))
    if ss_tot == 0:
        raise R2UndefinedError(mae, rmse)
    ss_res = float(np.sum((t - p) ** 2))
    return {"mae": mae, "rmse": rmse, "r2": 1.0 - ss_res / ss_tot}


# ---------------------------------------------------------------------------
# early stopping


class Decision(str, enum.Enum):
    IMPROVED = "improved"
    CONTINUE = "continue"
    STOP = "stop"


@dataclass
class EarlyStopState:
    patience: int = 20
    min_delta: float = 0.0
    best_score: float = -math.inf
    counter: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.min_delta < 0:
            raise ConfigError(f"min_delta must be >= 0, got {self.min_delta}")


def early_stop_observe(s: EarlyStopState, val_loss: float) -> Decision:
    score = -val_loss
    if score > s.best_score + s.min_delta:
        s.best_score = score
        s.counter = 0
        return Decision.IMPROVED
    s.counter += 1
    return Decision.STOP if s.counter > s.patience else Decision.CONTINUE


# ---------------------------------------------------------------------------
# fit


@dataclass
class TrainConfig:
    max_epochs: int = 1000
    batch_size: int = 300
    lr: float = 0.0005
    patience: int = 20
    min_delta: float = 0.0
    seed: int = 0
    target: str = "hr"
    checkpoint: str | None = None
    # Train on z-scored targets; the scaling is folded into the head on save, so
    # checkpoints, histories and metrics are always in physical units.
    standardize_targets: bool = True

    def validate(self) -> "TrainConfig":
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.target not in TARGETS:
            raise ConfigError(f"unknown target {self.target!r}; expected one of {list(TARGETS)}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        return self


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    best: float
    counter: int
    decision: str

    def log_line(self) -> str:
        return (
            f"epoch={self.epoch} train_mse={self.train_mse:.6g} val_mse={self.val_mse:.6g} "
            f"best={self.best:.6g} counter={self.counter}"
        )


@dataclass
class TrainRun:
    history: list[EpochRecord]
    best_val_loss: float
    best_epoch: int
    checkpoint_path: str | None
    checkpoint_writes: int
    stopped_early: bool
    target_mean: float
    target_std: float
    seconds: float

    def write_history_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_mse", "val_mse"])
            for rec in self.history:
                w.writerow([rec.epoch, repr(rec.train_mse), repr(rec.val_mse)])


def evaluate_mse(model: AicrnModel, data: Dataset, batch_size: int) -> float:
    pred = predict(model, data.x, batch_size)
    return float(np.mean((pred - data.y.astype(np.float64)) ** 2))


def _fold_target_scaling(model: AicrnModel, mean: float, std: float) -> AicrnModel:
    folded = copy.deepcopy(model)
    folded.head_weight.data *= folded.head_weight.dtype.type(std)
    folded.head_bias.data *= folded.head_bias.dtype.type(std)
    folded.head_bias.data += folded.head_bias.dtype.type(mean)
    return folded


def fit(
    model: AicrnModel,
    train: Dataset,
    val: Dataset,
    tc: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainRun:
    """Train ``model`` in place and leave it holding the best checkpoint.

    Histories are in the target's physical units squared regardless of
    ``standardize_targets``.
    """
    tc.validate()
    if len(train) == 0 or len(val) == 0:
        raise ConfigError("training and validation sets must be nonempty")
    overlap = set(train.ids) & set(val.ids)
    if overlap:
        raise ConfigError(f"training and validation sets share {len(overlap)} record ids")
    cfg = model.config
    for name, ds in (("train", train), ("val", val)):
        if ds.x.shape[1:] != (cfg.in_channels, cfg.input_len):
            raise ShapeError(
                f"{name} records have shape {ds.x.shape[1:]}, model expects ({cfg.in_channels}, {cfg.input_len})"
            )

    if tc.standardize_targets:
        mu = float(np.mean(train.y))
        sd = float(np.std(train.y)) or 1.0
    else:
        mu, sd = 0.0, 1.0
    y_scaled = ((train.y.astype(np.float64) - mu) / sd).astype(np.float32)
    work = Dataset(train.ids, train.x, y_scaled)
    scale2 = sd * sd

    params = model.parameters()
    opt = NadamState(lr=tc.lr)
    stopper = EarlyStopState(patience=tc.patience, min_delta=tc.min_delta)
    ckpt = Path(tc.checkpoint) if tc.checkpoint else None
    if ckpt is not None:
        ckpt.parent.mkdir(parents=True, exist_ok=True)
    best_state: dict[str, np.ndarray] | None = None
    history: list[EpochRecord] = []
    writes = 0
    best_epoch = 0
    stopped = False
    t0 = time.perf_counter()

    for epoch in range(1, tc.max_epochs + 1):
        drop_rng = np.random.default_rng([tc.seed, epoch, 1])
        total, count = 0.0, 0
        for xb, yb in batches(work, tc.batch_size, tc.seed, epoch):
            model.zero_grad()
            loss = mse_loss(forward(model, xb, "train", drop_rng), yb)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            T.backward(loss)
            grads = {}
            for name, p in params.items():
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                if not np.all(np.isfinite(g)):
                    raise TrainingError(f"non-finite gradient for {name!r} at epoch {epoch}")
                grads[name] = g
            nadam_step(params, grads, opt)
            total += float(loss.data) * len(yb.data)
            count += len(yb.data)
        train_mse = total / count * scale2
        val_mse = evaluate_mse(_fold_target_scaling(model, mu, sd) if tc.standardize_targets else model, val, tc.batch_size)
        if not np.isfinite(val_mse):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")

        decision = early_stop_observe(stopper, val_mse)
        if decision is Decision.IMPROVED:
            best_epoch = epoch
            snapshot = _fold_target_scaling(model, mu, sd) if tc.standardize_targets else model
            if ckpt is not None:
                save_weights(snapshot, ckpt)
            best_state = {k: v.copy() for k, v in snapshot.state_arrays().items()}
            writes += 1
        rec = EpochRecord(epoch, train_mse, val_mse, -stopper.best_score, stopper.counter, decision.value)
        history.append(rec)
        log.info(rec.log_line())
        if on_epoch is not None:
            on_epoch(rec)
        if decision is Decision.STOP:
            stopped = True
            break

    # Restore the best weights; from disk when a checkpoint was written.
    if ckpt is not None:
        model.load_state_arrays(load_weights(ckpt).state_arrays())
    else:
        model.load_state_arrays(best_state)
    return TrainRun(
        history=history,
        best_val_loss=-stopper.best_score,
        best_epoch=best_epoch,
        checkpoint_path=str(ckpt) if ckpt else None,
        checkpoint_writes=writes,
        stopped_early=stopped,
        target_mean=mu,
        target_std=sd,
        seconds=time.perf_counter() - t0,
    )
