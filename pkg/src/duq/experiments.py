"""Seeded experiment drivers shared by the acceptance suite and ``scripts/``.

Each run trains one variant on the synthetic benchmark generated with the
same seed, evaluates it on every held-out split and keeps a compact JSON
summary.  With a cache directory, checkpoints and summaries are written
there and reused when the configuration matches.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bench import BenchConfig, make_split
from .trainer import TrainConfig, TrainLog, evaluate, load_checkpoint, save_checkpoint, train

EVAL_SPLITS = ("val", "test_id", "test_ood")


@dataclass
class RunSpec:
    variant: str
    seed: int
    train: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**self.train, "variant": self.variant, "seed": self.seed})

    def bench_config(self) -> BenchConfig:
        return BenchConfig(**{**self.bench, "seed": self.seed})

    def key(self) -> str:
        blob = json.dumps({"train": asdict(self.train_config()), "bench": asdict(self.bench_config())},
                          sort_keys=True)
        return f"{self.variant}_s{self.seed}_{hashlib.sha256(blob.encode()).hexdigest()[:10]}"


def pearson(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    if a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def coefficient_of_variation(v) -> float:
    v = np.ravel(v)
    return float(v.std() / v.mean())


def summarize(state, splits: dict) -> dict:
    """Per-split reports plus the uncertainty statistics the criteria need."""
    out = {}
    for name, split in splits.items():
        ev = evaluate(state, split, keep_outputs=True)
        rec = ev.report.as_dict()
        rec["epistemic_per_image"] = [float(o.epistemic.mean()) for o in ev.outputs]
        if name == "val":
            ua = np.concatenate([o.aleatoric.ravel() for o in ev.outputs])
            rec["pearson_aleatoric_noise"] = pearson(ua, split.noise)
            if ev.outputs[0].sigma_sq is not None:
                ss = [o.sigma_sq for o in ev.outputs]
                rec["sigma_sq_cv"] = float(np.mean([coefficient_of_variation(s) for s in ss]))
                rec["sigma_sq_mean"] = float(np.mean([s.mean() for s in ss]))
                rec["pearson_sigma_sq_noise"] = pearson(np.concatenate([s.ravel() for s in ss]),
                                                        split.noise)
        out[name] = rec
    return out


def run(spec: RunSpec, cache_dir=None, progress=None) -> dict:
    """Train (or reuse) one run and return its summary."""
    cache = Path(cache_dir) / spec.key() if cache_dir is not None else None
    if cache is not None and (cache / "summary.json").exists():
        return json.loads((cache / "summary.json").read_text())
    bc = spec.bench_config()
    splits = {s: make_split(bc, s) for s in ("train",) + EVAL_SPLITS}
    t0 = time.perf_counter()
    state, log = train(spec.train_config(), splits["train"], splits["val"], progress=progress)
    seconds = time.perf_counter() - t0
    summary = {"spec": asdict(spec), "train_seconds": seconds, "log": log.rows,
               "splits": summarize(state, {s: splits[s] for s in EVAL_SPLITS})}
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state, cache / "model.duqc")
        log.write(cache / "train_log.csv")
        (cache / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary


def load_run(spec: RunSpec, cache_dir):
    """Checkpoint and TrainLog of a cached run."""
    cache = Path(cache_dir) / spec.key()
    state, _ = load_checkpoint(cache / "model.duqc")
    return state, TrainLog.read(cache / "train_log.csv")


# ---------------------------------------------------------------------------
# the comparisons


def calibration_comparison(seeds=(0, 1, 2), train_overrides: dict | None = None,
                           bench_overrides: dict | None = None, cache_dir=None, progress=None) -> dict:
    """Base vs full model on test_id, plus the full model's OOD / ID epistemic ratio."""
    train_overrides = train_overrides or {}
    bench_overrides = bench_overrides or {}
    runs = {v: [run(RunSpec(v, s, train_overrides, bench_overrides), cache_dir, progress) for s in seeds]
            for v in ("base", "full")}

    def avg(variant, split, key):
        return float(np.mean([r["splits"][split][key] for r in runs[variant]]))

    id_epi = avg("full", "test_id", "epistemic_mean")
    ood_epi = avg("full", "test_ood", "epistemic_mean")
    return {
        "seeds": list(seeds),
        "base_ece_d": avg("base", "test_id", "ece_d"),
        "full_ece_d": avg("full", "test_id", "ece_d"),
        "base_pavpu": avg("base", "test_id", "pavpu"),
        "full_pavpu": avg("full", "test_id", "pavpu"),
        "id_epistemic": id_epi,
        "ood_epistemic": ood_epi,
        "ood_ratio": ood_epi / id_epi if id_epi > 0 else float("inf"),
        "train_seconds": sum(r["train_seconds"] for v in runs.values() for r in v),
        "runs": runs,
    }


def trivial_solution(seed: int = 0, train_overrides: dict | None = None,
                     bench_overrides: dict | None = None, cache_dir=None, progress=None) -> dict:
    """Plain dual-head regression (no consistency terms) vs the full model's aleatoric map."""
    train_overrides = train_overrides or {}
    dual = run(RunSpec("dual_head", seed, {**train_overrides, "loss_mode": "regression"},
                       bench_overrides or {}), cache_dir, progress)
    full = run(RunSpec("full", seed, train_overrides, bench_overrides or {}), cache_dir, progress)
    return {
        "dual_sigma_sq_cv": dual["splits"]["val"]["sigma_sq_cv"],
        "dual_sigma_sq_pearson": dual["splits"]["val"]["pearson_sigma_sq_noise"],
        "full_aleatoric_pearson": full["splits"]["val"]["pearson_aleatoric_noise"],
        "train_seconds": dual["train_seconds"] + full["train_seconds"],
    }

