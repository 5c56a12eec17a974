"""Train and evaluate the seeded comparison runs, printing the headline numbers.

    python3 scripts/run_experiments.py --cache runs/ --seeds 0 1 2
    python3 scripts/run_experiments.py --cache runs/ --only trivial

Runs are cached by configuration hash, so re-running only evaluates new ones.
"""

import argparse
import json

from duq.experiments import calibration_comparison, trivial_solution


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cache", default="runs")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--only", choices=["calibration", "trivial"], default=None)
    args = ap.parse_args()
    overrides = {} if args.epochs is None else {"epochs": args.epochs}

    def progress(row):
        if row["epoch"] % 10 == 9:
            print(f"  epoch {row['epoch'] + 1}: L_d={row['L_d']:.4f} val_mae={row['val_mae']:.4f} "
                  f"val_ece_d={row['val_ece_d']:.4f}", flush=True)

    if args.only in (None, "trivial"):
        res = trivial_solution(args.seeds[0], overrides, cache_dir=args.cache, progress=progress)
        print(json.dumps(res, indent=1), flush=True)
    if args.only in (None, "calibration"):
        res = calibration_comparison(tuple(args.seeds), overrides, cache_dir=args.cache,
                                     progress=progress)
        res.pop("runs")
        print(json.dumps(res, indent=1), flush=True)


if __name__ == "__main__":
    main()
