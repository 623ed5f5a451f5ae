"""Single-batch overfit sanity run: 16 synthetic records, tiny model, up to 500 epochs.

    python3 scripts/overfit.py [--epochs 500] [--out runs/overfit]
"""

import argparse
import json
import sys
import tempfile
from pathlib import Path

from aicrn.experiments import OverfitConfig, overfit


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epochs", type=int, default=OverfitConfig.max_epochs)
    p.add_argument("--out", help="corpus and result directory (default: a temporary directory)")
    args = p.parse_args(argv)
    out = Path(args.out or tempfile.mkdtemp(prefix="overfit-"))
    out.mkdir(parents=True, exist_ok=True)

    def log(rec):
        if rec.epoch % 25 == 0 or rec.epoch == 1:
            print(rec.log_line(), flush=True)

    result = overfit(OverfitConfig(max_epochs=args.epochs), out / "corpus", on_epoch=log)
    (out / "overfit.json").write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps(result, indent=2))
    return 0 if result["reduction"] >= result["config"]["required_reduction"] else 1


if __name__ == "__main__":
    sys.exit(main())
