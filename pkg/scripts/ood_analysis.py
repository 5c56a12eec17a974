"""Break down the full model's uncertainty maps on in-distribution vs OOD test images.

    python3 scripts/ood_analysis.py --cache runs/ --seed 0

Needs a cached ``full`` run (see run_experiments.py).  Prints, per split, the
mean of each map, the raw (unclamped) epistemic residual, the unnormalised
head outputs exp(s) and the prediction error, so one can see where the
OOD / ID gap is lost.
"""

import argparse

import numpy as np

from duq.bench import BenchConfig, make_split
from duq.experiments import RunSpec, load_run
from duq.nn import RngStream
from duq.trainer import evaluate


def raw_head_means(state, split):
    """Per-image mean of exp(s) for both heads, before min-max normalisation."""
    stream = RngStream(state.cfg.seed, 90)
    ale, pre = [], []
    for i in range(len(split)):
        x = split.images[i:i + 1]
        _, stoch, _ = state.model.predict(x, stream.generator(i))
        s_a, _ = state.heads.aleatoric_s(x)
        s_p, _ = state.heads.predictive_s(x, stoch)
        ale.append(float(np.exp(s_a).mean()))
        pre.append(float(np.exp(s_p).mean()))
    return np.mean(ale), np.mean(pre)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cache", default="runs")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    state, _ = load_run(RunSpec("full", args.seed), args.cache)
    bc = BenchConfig(seed=args.seed)
    print(f"{'split':10s} {'U_a':>7s} {'U_p':>7s} {'epi':>7s} {'epi_raw':>8s} {'exp(s_a)':>9s} "
          f"{'exp(s_p)':>9s} {'err':>7s}")
    for name in ("test_id", "test_ood"):
        split = make_split(bc, name)
        ev = evaluate(state, split, keep_outputs=True)
        o = ev.outputs
        err = np.mean([np.abs(x.prediction - y).mean() for x, y in zip(o, split.labels)])
        ra, rp = raw_head_means(state, split)
        print(f"{name:10s} {np.mean([x.aleatoric.mean() for x in o]):7.4f} "
              f"{np.mean([x.predictive.mean() for x in o]):7.4f} "
              f"{np.mean([x.epistemic.mean() for x in o]):7.4f} "
              f"{np.mean([x.epistemic_raw.mean() for x in o]):8.4f} {ra:9.4f} {rp:9.4f} {err:7.4f}")


if __name__ == "__main__":
    main()
