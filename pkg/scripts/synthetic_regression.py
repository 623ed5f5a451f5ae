"""Train heart-rate regressors with and without attention on a 640-record synthetic corpus.

    python3 scripts/synthetic_regression.py --out runs/synthetic [--max-epochs 60] [--arms attention no_attention]

Writes one checkpoint directory per arm plus ``summary.json`` (test metrics,
mean-predictor baseline and the arm comparison).
"""

import argparse
import json
import sys

from aicrn.experiments import RegressionConfig, synthetic_regression


def main(argv=None):
    defaults = RegressionConfig()
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--max-epochs", type=int, default=defaults.max_epochs)
    p.add_argument("--patience", type=int, default=defaults.patience)
    p.add_argument("--n-records", type=int, default=defaults.n_records)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--arms", nargs="+", choices=["attention", "no_attention"], default=["attention", "no_attention"])
    args = p.parse_args(argv)
    cfg = RegressionConfig(max_epochs=args.max_epochs, patience=args.patience, n_records=args.n_records, seed=args.seed)

    def log(arm, rec):
        print(f"arm={arm} {rec.log_line()}", flush=True)

    summary = synthetic_regression(cfg, args.out, tuple(a == "attention" for a in args.arms), on_epoch=log)
    print(json.dumps({k: summary[k] for k in ("baseline", "arms", "comparison") if k in summary}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
