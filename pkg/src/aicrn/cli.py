"""Command-line entry point: ``aicrn {gen-data,train,eval,predict,report,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from datetime import datetime
from pathlib import Path

import numpy as np

from .data import TARGETS, SplitSpec, clean, load_records
from .errors import ConfigError
from .network import AicrnConfig
from .training import TrainConfig

log = logging.getLogger("aicrn")

DEFAULT_MODEL = AicrnConfig()
DEFAULT_TRAIN = TrainConfig()


class StageError(Exception):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"{stage} failed: {exc}")
        self.stage = stage


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload) if getattr(args, "json", False) else text)


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    from .synthetic import GeneratorConfig, generate_corpus

    g = GeneratorConfig(
        n_records=args.n,
        seed=args.seed,
        noise_std_mv=args.noise,
        duration_s=args.duration,
        sample_rate_hz=args.rate,
    )
    manifest = generate_corpus(g, args.out)
    path = Path(args.out) / "manifest.json"
    _emit(args, {"manifest": str(path), "n": len(manifest.ids)}, str(path))
    return 0


# ---------------------------------------------------------------------------
# train


def _model_config(args, input_len: int) -> AicrnConfig:
    return replace(
        DEFAULT_MODEL,
        input_len=input_len,
        stem_width=args.width,
        num_blocks=args.blocks,
        attention=not args.no_attention,
        cbam_ratio=args.cbam_ratio,
        stem_kernel=args.stem_kernel,
        block_kernel=args.block_kernel,
        dropout_p=args.dropout,
    ).validate()


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except Exception as exc:
        raise StageError(name, exc) from exc


def cmd_train(args) -> int:
    from .workflow import prepare, train_target

    targets = list(TARGETS) if args.target == "all" else [args.target]
    try:
        model_cfg = _model_config(args, args.input_len)
        tc = TrainConfig(
            max_epochs=args.epochs,
            batch_size=args.batch,
            lr=args.lr,
            patience=args.patience,
            seed=args.seed,
            standardize_targets=not args.raw_targets,
        ).validate()
        if tc.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {tc.patience}")
    except ConfigError as exc:
        print(f"aicrn train: error: {exc}", file=sys.stderr)
        return 2
    records = _stage("load", load_records, args.data)
    summary = []
    for target in targets:
        data = _stage(
            f"prepare[{target}]", prepare, records, target, SplitSpec(seed=args.seed), model_cfg.input_len
        )

        def on_epoch(rec, target=target):
            if not args.quiet:
                print(f"target={target} {rec.log_line()}", flush=True)

        _, run, meta = _stage(
            f"fit[{target}]", train_target, data, model_cfg, replace(tc, target=target), args.out, on_epoch
        )
        summary.append(
            {
                "target": target,
                "checkpoint": run.checkpoint_path,
                "best_epoch": run.best_epoch,
                "best_val_mse": run.best_val_loss,
                "epochs_run": len(run.history),
                "metrics": meta["metrics"],
            }
        )
        if not args.json:
            m = meta["metrics"].get("test") or meta["metrics"]["val"]
            print(f"{target}: checkpoint {run.checkpoint_path} best_epoch={run.best_epoch} " + _fmt_metrics(m))
    if args.json:
        print(json.dumps(summary))
    return 0


def _fmt_metrics(m: dict) -> str:
    r2 = "undefined" if m.get("r2") is None else f"{m['r2']:.4f}"
    return f"mae={m['mae']:.4g} rmse={m['rmse']:.4g} r2={r2}"


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    from .network import predict
    from .workflow import inference_arrays, load_model_and_meta, metrics_or_partial

    model, meta = _stage("load model", load_model_and_meta, args.model)
    target = meta.get("target")
    if target not in TARGETS:
        raise StageError("load model", ValueError(f"{args.model}: sidecar does not name a known target"))
    records, _ = _stage("clean", clean, _stage("load data", load_records, args.data), target)
    if args.split != "all":
        ids = set(meta.get("split", {}).get("ids", {}).get(args.split, []))
        records = [r for r in records if r.id in ids]
        if not records:
            raise StageError("select split", ValueError(f"no records of split {args.split!r} in {args.data}"))
    x = _stage("prepare", inference_arrays, model, meta, records)
    y = np.array([r.label(target) for r in records])
    pred = _stage("predict", predict, model, x)
    result = {"target": target, "n": len(records), **metrics_or_partial(pred, y)}
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps(result))
    return 0


# ---------------------------------------------------------------------------
# predict


def cmd_predict(args) -> int:
    from .network import predict
    from .workflow import inference_arrays, load_model_and_meta

    loaded = [_stage("load model", load_model_and_meta, path) for path in args.model]
    names = [meta.get("target", Path(p).stem) for (_, meta), p in zip(loaded, args.model)]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        print(f"error: duplicate target columns: {', '.join(dupes)}", file=sys.stderr)
        return 2
    records = _stage("load data", load_records, args.data)
    columns = []
    for model, meta in loaded:
        x = _stage("prepare", inference_arrays, model, meta, records)
        columns.append(_stage("predict", predict, model, x))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "timestamp", *names])
        for i, rec in enumerate(records):
            w.writerow([rec.id, rec.timestamp or "", *(format(col[i], ".9g") for col in columns)])
    _emit(args, {"predictions": args.out, "n": len(records), "columns": names}, args.out)
    return 0


# ---------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    from .workflow import least_squares_slope

    with open(args.predictions, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        fields = reader.fieldnames or []
    params = [f for f in fields if f not in ("record_id", "timestamp")]
    if "timestamp" not in fields or any(not r.get("timestamp") for r in rows):
        print("error: report requires timestamps", file=sys.stderr)
        return 1
    try:
        stamped = sorted(((datetime.fromisoformat(r["timestamp"]), r) for r in rows), key=lambda t: t[0])
    except ValueError as exc:
        print(f"error: report requires timestamps ({exc})", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    if stamped:
        t0 = stamped[0][0]
        hours = np.array([(t - t0).total_seconds() / 3600.0 for t, _ in stamped])
    for p in params:
        values = np.array([float(r[p]) for _, r in stamped])
        with open(out / f"{p}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "value"])
            for (t, r) in stamped:
                w.writerow([t.isoformat(), r[p]])
        summary[p] = {
            "n": int(values.size),
            "min": float(values.min()) if values.size else None,
            "max": float(values.max()) if values.size else None,
            "mean": float(values.mean()) if values.size else None,
            "trend_slope_per_hour": least_squares_slope(hours, values) if values.size else 0.0,
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    _emit(args, summary, "\n".join(
        f"{p}: min={s['min']:.4g} max={s['max']:.4g} mean={s['mean']:.4g} slope/h={s['trend_slope_per_hour']:.4g}"
        for p, s in summary.items() if s["n"]
    ) or "no rows")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    from .gradcheck import CASES, run_suite

    unknown = sorted(set(args.only or ()) - set(CASES))
    if unknown:
        print(f"aicrn gradcheck: error: unknown ops {unknown}; choose from {sorted(CASES)}", file=sys.stderr)
        return 2
    results = run_suite(seed=args.seed, names=args.only)
    failing = [r.name for r in results if not r.passed]
    if args.json:
        print(json.dumps([
            {"op": r.name, "max_rel_err": r.error, "threshold": r.threshold, "checked": r.checked,
             "straddled": r.straddled, "passed": r.passed}
            for r in results
        ]))
    else:
        for r in results:
            flag = "ok  " if r.passed else "FAIL"
            print(f"{flag} {r.name:<26} max_rel_err={r.error:.3e} (< {r.threshold:g}) "
                  f"checked={r.checked} kink_straddles={r.straddled}")
    if failing:
        print("failing ops: " + ", ".join(failing), file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aicrn", description="ECG parameter regression with an attention-integrated residual CNN."
    )
    parser.add_argument("--json", action="store_true", help="machine-readable stdout")
    parser.add_argument("-v", "--verbose", action="store_true")
    # also accepted after the subcommand; SUPPRESS keeps the top-level value when absent
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="machine-readable stdout")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic ECG corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.02, help="noise std in mV")
    p.add_argument("--duration", type=float, default=10.0, help="seconds per record")
    p.add_argument("--rate", type=float, default=100.0, help="sample rate in Hz")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train one model per target")
    p.add_argument("--data", required=True, help="metadata CSV")
    p.add_argument("--target", required=True, choices=[*TARGETS, "all"])
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=DEFAULT_MODEL.stem_width)
    p.add_argument("--blocks", type=int, default=DEFAULT_MODEL.num_blocks)
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--cbam-ratio", type=int, default=DEFAULT_MODEL.cbam_ratio)
    p.add_argument("--stem-kernel", type=int, default=DEFAULT_MODEL.stem_kernel)
    p.add_argument("--block-kernel", type=int, default=DEFAULT_MODEL.block_kernel)
    p.add_argument("--dropout", type=float, default=DEFAULT_MODEL.dropout_p)
    p.add_argument("--input-len", type=int, default=DEFAULT_MODEL.input_len)
    p.add_argument("--epochs", type=int, default=DEFAULT_TRAIN.max_epochs)
    p.add_argument("--batch", type=int, default=DEFAULT_TRAIN.batch_size)
    p.add_argument("--lr", type=float, default=DEFAULT_TRAIN.lr)
    p.add_argument("--patience", type=int, default=DEFAULT_TRAIN.patience)
    p.add_argument("--seed", type=int, default=DEFAULT_TRAIN.seed)
    p.add_argument("--raw-targets", action="store_true", help="regress unscaled physical units")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch log lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="MAE/RMSE/R2 of a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="all", choices=["all", "train", "val", "test"])
    p.add_argument("--out", help="also write the JSON result here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="per-record predictions from one or more checkpoints")
    p.add_argument("--model", required=True, nargs="+")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", parents=[common], help="per-parameter time series and trend summary")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", nargs="+", metavar="OP", help="check only these cases")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 2 on usage errors, 0 for --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
