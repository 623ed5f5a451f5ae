"""Desk-scale experiments on synthetic corpora: single-batch overfit and the
attention / no-attention regression comparison."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, SplitSpec, load_records
from .network import AicrnConfig, build, predict
from .synthetic import GeneratorConfig, generate_corpus
from .training import TrainConfig, compute_metrics, fit
from .workflow import metrics_or_partial, prepare, train_target

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OverfitConfig:
    n_records: int = 16
    seed: int = 3
    width: int = 8
    blocks: int = 2
    cbam_ratio: int = 4
    max_epochs: int = 500
    batch_size: int = 16
    lr: float = 0.0005
    target: str = "hr"
    # dropout is switched off: it exists to prevent exactly the memorization measured here
    dropout_p: float = 0.0
    required_reduction: float = 100.0


def overfit(cfg: OverfitConfig, work_dir, on_epoch=None) -> dict:
    """Train a tiny model on one batch of records, validated on the same records."""
    generate_corpus(GeneratorConfig(n_records=cfg.n_records, seed=cfg.seed), work_dir)
    records = load_records(Path(work_dir) / "metadata.csv")
    data = prepare(records, cfg.target, SplitSpec(1.0, 0.0, 0.0, cfg.seed), 1000).train
    # fit() insists on disjoint id sets, so the validation copy is relabelled
    val = Dataset([f"{i}#val" for i in data.ids], data.x, data.y)
    model_cfg = AicrnConfig(stem_width=cfg.width, num_blocks=cfg.blocks, cbam_ratio=cfg.cbam_ratio,
                            dropout_p=cfg.dropout_p)
    model = build(model_cfg, np.random.default_rng(cfg.seed))
    tc = TrainConfig(max_epochs=cfg.max_epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                     patience=cfg.max_epochs, seed=cfg.seed, target=cfg.target)
    t0 = time.perf_counter()
    run = fit(model, data, val, tc, on_epoch=on_epoch)
    train_mse = [r.train_mse for r in run.history]
    first, best = train_mse[0], min(train_mse)
    final_eval = float(np.mean((predict(model, data.x) - data.y) ** 2))
    reached = next((r.epoch for r in run.history if first / r.train_mse >= cfg.required_reduction), None)
    return {
        "config": asdict(cfg),
        "epochs": len(run.history),
        "first_train_mse": first,
        "min_train_mse": best,
        "reduction": first / best,
        "epoch_reaching_required_reduction": reached,
        "eval_mode_train_mse_after": final_eval,
        "seconds": time.perf_counter() - t0,
    }


@dataclass(frozen=True)
class RegressionConfig:
    n_records: int = 640
    corpus_seed: int = 2024
    split_seed: int = 0
    target: str = "hr"
    width: int = 16
    blocks: int = 4
    cbam_ratio: int = 8
    batch_size: int = 32
    lr: float = 0.0005
    patience: int = 20
    max_epochs: int = 60
    seed: int = 0


def _arm(cfg: RegressionConfig, data, attention: bool, out_dir: Path, on_epoch=None) -> dict:
    model_cfg = AicrnConfig(stem_width=cfg.width, num_blocks=cfg.blocks, cbam_ratio=cfg.cbam_ratio,
                            attention=attention)
    tc = TrainConfig(max_epochs=cfg.max_epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                     patience=cfg.patience, seed=cfg.seed)
    model, run, meta = train_target(data, model_cfg, tc, out_dir, on_epoch)
    return {
        "attention": attention,
        "parameters": model.num_parameters(),
        "epochs_run": len(run.history),
        "best_epoch": run.best_epoch,
        "stopped_early": run.stopped_early,
        "best_val_mse": run.best_val_loss,
        "seconds": run.seconds,
        "test": meta["metrics"]["test"],
        "test_n": len(data.test),
        "val": meta["metrics"]["val"],
        "checkpoint": run.checkpoint_path,
    }


def synthetic_regression(cfg: RegressionConfig, out_dir, arms=(True, False), on_epoch=None) -> dict:
    """Generate a corpus, train one model per arm and write ``summary.json``."""
    out = Path(out_dir)
    corpus = out / "corpus"
    generate_corpus(GeneratorConfig(n_records=cfg.n_records, seed=cfg.corpus_seed), corpus)
    records = load_records(corpus / "metadata.csv")
    data = prepare(records, cfg.target, SplitSpec(seed=cfg.split_seed), 1000)

    train_mean = float(np.mean(data.train.y))
    baseline = {
        "train_mean_on_test": metrics_or_partial(np.full(len(data.test), train_mean), data.test.y),
        "test_mean_on_test": compute_metrics(np.full(len(data.test), np.mean(data.test.y, dtype=np.float64)),
                                             data.test.y),
    }
    results = {}
    for attention in arms:
        name = "attention" if attention else "no_attention"
        arm_dir = out / name
        cb = None if on_epoch is None else (lambda rec, name=name: on_epoch(name, rec))
        results[name] = _arm(cfg, data, attention, arm_dir, cb)
        log.info("%s: %s", name, results[name]["test"])

    summary = {
        "config": asdict(cfg),
        "sizes": {"train": len(data.train), "val": len(data.val), "test": len(data.test)},
        "baseline": baseline,
        "arms": results,
    }
    if "attention" in results and "no_attention" in results:
        a, b = results["attention"], results["no_attention"]
        summary["comparison"] = {
            "test_mae_attention_minus_no_attention": a["test"]["mae"] - b["test"]["mae"],
            "test_rmse_attention_minus_no_attention": a["test"]["rmse"] - b["test"]["rmse"],
            "test_r2_attention_minus_no_attention": a["test"]["r2"] - b["test"]["r2"],
            "extra_parameters_for_attention": a["parameters"] - b["parameters"],
            "seconds_ratio_attention_over_no_attention": a["seconds"] / b["seconds"] if b["seconds"] else None,
            "note": comparison_note(a, b),
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def comparison_note(a: dict, b: dict) -> str:
    da = a["test"]["mae"] - b["test"]["mae"]
    better = "lower" if da < 0 else "higher"
    return (
        f"with attention the test MAE is {abs(da):.3f} {better} ({a['test']['mae']:.3f} vs "
        f"{b['test']['mae']:.3f}), R2 {a['test']['r2']:.4f} vs {b['test']['r2']:.4f}, at "
        f"{a['parameters'] - b['parameters']} extra parameters (single seed, "
        f"{a['test_n']} test records, no significance test)"
    )


