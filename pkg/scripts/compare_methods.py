"""Train the main model and the four baselines on one benchmark and print the comparison table.

    python3 scripts/compare_methods.py --out compare/ --seed 0 --epochs 50

Everything goes through the ``duq`` command line, so each step leaves its
run manifest next to its outputs.
"""

import argparse
import sys
from pathlib import Path

from duq.cli import dispatch

BASELINES = ("mc-dropout", "deep-ensemble", "gan", "cvae")


def run(argv):
    print("$ duq " + " ".join(argv), flush=True)
    rc = dispatch(argv)
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="compare")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=50)
    args = ap.parse_args()
    out = Path(args.out)
    data = out / "data"
    seed, epochs = str(args.seed), str(args.epochs)
    run(["gen-data", "--out", str(data), "--seed", seed])
    ckpts = {}
    for variant in ("base", "full"):
        cfg = out / f"{variant}.json"
        cfg.write_text(f'{{"variant": "{variant}"}}')
        run(["train", "--config", str(cfg), "--data", str(data), "--out", str(out / variant),
             "--seed", seed, "--epochs", epochs])
        ckpts[variant] = out / variant / "model.duqc"
    for method in BASELINES:
        run(["baseline", "--method", method, "--data", str(data), "--out", str(out / method),
             "--seed", seed, "--epochs", epochs])
        ckpts[method] = out / method / "model.duqc"
    csvs = []
    for name, ckpt in ckpts.items():
        run(["eval", "--ckpt", str(ckpt), "--data", str(data), "--report", str(out / f"{name}.json")])
        csvs.append(str(out / f"{name}.csv"))
    run(["report", *csvs, "--out", str(out / "table.csv")])


if __name__ == "__main__":
    main()
