"""End-to-end steps shared by the CLI and the experiment scripts."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import (
    TARGETS,
    CleanReport,
    Dataset,
    EcgRecord,
    NormalizationStats,
    SplitSpec,
    clean,
    normalize,
    split,
)
from .errors import R2UndefinedError
from .network import AicrnConfig, AicrnModel, build, load_weights, meta_path, predict
from .training import EpochRecord, TrainConfig, TrainRun, compute_metrics, fit

log = logging.getLogger(__name__)


@dataclass
class PreparedData:
    target: str
    train: Dataset
    val: Dataset
    test: Dataset
    stats: NormalizationStats
    report: CleanReport
    split_spec: SplitSpec


def prepare(records: Sequence[EcgRecord], target: str, spec: SplitSpec, input_len: int) -> PreparedData:
    """clean -> split -> per-lead z-score with training-split statistics -> stacked arrays."""
    kept, report = clean(records, target)
    log.info("target %s: kept %d records, excluded %d", target, report.kept, report.excluded)
    tr, va, te = split(kept, spec)
    stats = NormalizationStats.from_records(tr)

    def stack(rs):
        return Dataset.from_records(normalize(rs, stats), target, input_len)

    return PreparedData(target, stack(tr), stack(va), stack(te), stats, report, spec)


def metrics_or_partial(pred, target) -> dict:
    try:
        return compute_metrics(pred, target)
    except R2UndefinedError as exc:
        return {"mae": exc.mae, "rmse": exc.rmse, "r2": None}


def train_target(
    data: PreparedData,
    model_config: AicrnConfig,
    tc: TrainConfig,
    out_dir,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[AicrnModel, TrainRun, dict]:
    """Build, fit and persist one model: ``<target>.aicn``, ``<target>.meta.json``, ``<target>_history.csv``.

    On failure every file this call created is removed before re-raising.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"{data.target}.aicn"
    history = out / f"{data.target}_history.csv"
    meta_file = meta_path(ckpt)
    tc.target = data.target
    tc.checkpoint = str(ckpt)
    try:
        model = build(model_config, np.random.default_rng(tc.seed))
        run = fit(model, data.train, data.val, tc, on_epoch=on_epoch)
        run.write_history_csv(history)
        metrics = {
            name: metrics_or_partial(predict(model, ds.x), ds.y)
            for name, ds in (("train", data.train), ("val", data.val), ("test", data.test))
            if len(ds)
        }
        meta = {
            "target": data.target,
            "label_column": TARGETS[data.target],
            "attention": model_config.attention,
            "model_config": asdict(model_config),
            "train_config": asdict(tc),
            "normalization": data.stats.to_dict(),
            "target_scaling": {"mean": run.target_mean, "std": run.target_std, "folded_into_head": True},
            "split": {**asdict(data.split_spec), "ids": {
                "train": data.train.ids, "val": data.val.ids, "test": data.test.ids}},
            "clean_report": asdict(data.report),
            "best_epoch": run.best_epoch,
            "best_val_mse": run.best_val_loss,
            "epochs_run": len(run.history),
            "stopped_early": run.stopped_early,
            "checkpoint_writes": run.checkpoint_writes,
            "seconds": run.seconds,
            "history_csv": history.name,
            "metrics": metrics,
        }
        meta_file.write_text(json.dumps(meta, indent=2) + "\n")
    except BaseException:
        for f in (ckpt, history, meta_file, ckpt.with_name(ckpt.name + ".tmp")):
            f.unlink(missing_ok=True)
        raise
    return model, run, meta


def load_model_and_meta(checkpoint) -> tuple[AicrnModel, dict]:
    model = load_weights(checkpoint)
    mfile = meta_path(checkpoint)
    meta = json.loads(mfile.read_text()) if mfile.exists() else {}
    return model, meta


def inference_arrays(model: AicrnModel, meta: dict, records: Sequence[EcgRecord]) -> np.ndarray:
    """Normalize records with the checkpoint's stored statistics and stack them as model input."""
    stats = NormalizationStats.from_dict(meta["normalization"]) if "normalization" in meta else NormalizationStats.identity()
    target = meta.get("target", "hr")
    return Dataset.from_records(normalize(records, stats), target, model.config.input_len).x


def least_squares_slope(t: np.ndarray, y: np.ndarray) -> float:
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if t.size < 2:
        return 0.0
    tc = t - t.mean()
    denom = float(np.dot(tc, tc))
    return 0.0 if denom == 0 else float(np.dot(tc, y - y.mean()) / denom)
