"""``duq`` command line: gen-data, train, eval, baseline, grad-check, report.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (BaselineConfig, BaselineState, evaluate_baseline, method_name,
                        train_baseline)
from .bench import BenchConfig, generate_dataset, load_bench_config, load_split
from .checks import GRAD_TOL, gradcheck_suite
from .errors import ConfigError, DuqError, UsageError
from .formats import decode_checkpoint, write_dmap, write_pgm
from .nn import TensorMap
from .trainer import TrainConfig, TrainState, evaluate, train

MAP_KINDS = ("prediction", "aleatoric", "epistemic", "predictive")


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int | None
    artifacts: dict = field(default_factory=dict)
    version: str = __version__
    wall_time: float = 0.0

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True))


def worker_count() -> int:
    raw = os.environ.get("DUQ_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"DUQ_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise UsageError("DUQ_THREADS must be >= 1")
    return n


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> dict:
    raw = _read_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = BenchConfig.from_dict(raw)
    out = Path(args.out)
    manifests = generate_dataset(cfg, out)
    m = RunManifest("gen-data", args.argv, asdict(cfg), cfg.seed,
                    {s: str(out / s) for s in manifests})
    return {"manifest": m, "manifest_path": out / "run_manifest.json"}


def _load_data(root, splits):
    return [load_split(root, s) for s in splits]


def _print_progress(row: dict) -> None:
    print(f"epoch {row['epoch']}: L_d={row['L_d']:.4f} val_mae={row['val_mae']:.4f}", file=sys.stderr)


def cmd_train(args) -> dict:
    raw = _read_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    cfg = TrainConfig.from_dict(raw)
    tr, va = _load_data(args.data, ["train", "val"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, log = train(cfg, tr, va, out_dir=out, progress=_print_progress if args.verbose else None)
    (out / "epoch_times.json").write_text(json.dumps(log.wall_times))
    m = RunManifest("train", args.argv, {**asdict(cfg), "data": str(args.data)}, cfg.seed,
                    {"checkpoint": str(out / "model.duqc"), "train_log": str(out / "train_log.csv")})
    return {"manifest": m, "manifest_path": out / "run_manifest.json"}


def cmd_baseline(args) -> dict:
    raw = _read_json(args.config)
    raw["method"] = method_name(args.method)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    cfg = BaselineConfig.from_dict(raw)
    tr, va = _load_data(args.data, ["train", "val"])
    out = Path(args.out)
    _, log = train_baseline(cfg, tr, va, out_dir=out)
    (out / "epoch_times.json").write_text(json.dumps(log.wall_times))
    m = RunManifest("baseline", args.argv, {**asdict(cfg), "data": str(args.data)}, cfg.seed,
                    {"checkpoint": str(out / "model.duqc"), "train_log": str(out / "train_log.csv")})
    return {"manifest": m, "manifest_path": out / "run_manifest.json"}


def load_any_checkpoint(path):
    """Return ``(state, method)`` for a main-model or baseline checkpoint."""
    buf = Path(path).read_bytes()
    header, _ = decode_checkpoint(buf)
    if header.get("method", "duq") == "duq":
        return TrainState.from_bytes(buf)[0], "duq-" + header["variant"]
    return BaselineState.from_bytes(buf), header["method"]


def _write_maps(root: Path, split: str, files, outputs) -> int:
    d = root / split
    d.mkdir(parents=True, exist_ok=True)
    n = 0
    for f, out in zip(files, outputs):
        for kind in MAP_KINDS:
            arr = np.asarray(getattr(out, kind)).reshape(1, *np.shape(out.prediction)[-2:])
            t = TensorMap(arr)
            write_dmap(d / f"{f}_{kind}.dmap", t)
            write_pgm(d / f"{f}_{kind}.pgm", TensorMap(np.clip(arr, 0.0, 1.0)))
            n += 2
    return n


def cmd_eval(args) -> dict:
    state, method = load_any_checkpoint(args.ckpt)
    splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    workers = worker_count()
    report = {"method": method, "checkpoint": str(args.ckpt),
              "checkpoint_sha256": sha256_file(args.ckpt), "splits": {}}
    rows = []
    maps_root = Path(args.maps) if args.maps else None
    n_maps = 0
    for split in splits:
        data = load_split(args.data, split)
        if isinstance(state, TrainState):
            res = evaluate(state, data, keep_outputs=maps_root is not None, workers=workers)
        else:
            res = evaluate_baseline(state, data, keep_outputs=maps_root is not None, workers=workers)
        report["splits"][split] = res.report.as_dict()
        rows += [{"method": method, "split": split, **m.row()} for m in res.images]
        if maps_root is not None:
            n_maps += _write_maps(maps_root, split, data.files, res.outputs)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report, indent=1, sort_keys=True))
    csv_path = Path(args.csv) if args.csv else report_path.with_suffix(".csv")
    write_rows(csv_path, rows)
    for split, agg in report["splits"].items():
        print(f"{method} {split}: mae={agg['mae']:.4f} f_beta={agg['f_beta']:.4f} "
              f"ece_d={agg['ece_d']:.4f} pavpu={agg['pavpu']:.4f} "
              f"epistemic={agg['epistemic_mean']:.4f}")
    artifacts = {"report": str(report_path), "csv": str(csv_path)}
    if maps_root is not None:
        artifacts.update(maps=str(maps_root), n_map_files=n_maps)
    m = RunManifest("eval", args.argv, {"ckpt": str(args.ckpt), "data": str(args.data),
                                        "splits": splits, "workers": workers,
                                        "bench": asdict(load_bench_config(args.data))},
                    None, artifacts)
    return {"manifest": m, "manifest_path": report_path.with_name(report_path.stem + ".manifest.json")}


def write_rows(path, rows: list[dict]) -> None:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_grad_check(args) -> dict:
    results = gradcheck_suite(args.seed)
    for name, err in results.items():
        print(f"{name:20s} {err:.3e}")
    worst = max(results.values())
    print(f"max relative error {worst:.3e} ({'pass' if worst < GRAD_TOL else 'FAIL'}, tol {GRAD_TOL:g})")
    return {"exit": 0 if worst < GRAD_TOL else 2}


REPORT_METRICS = ("f_beta", "mae", "ece_d", "pavpu")


def comparison_table(rows: list[dict]) -> tuple[list[str], list[list[str]]]:
    """One row per method; for each split the mean F_beta, MAE, ECE_d and PAvPU."""
    methods = list(dict.fromkeys(r["method"] for r in rows))
    splits = list(dict.fromkeys(r["split"] for r in rows))
    header = ["method"] + [f"{s}:{k}" for s in splits for k in REPORT_METRICS]
    table = []
    for m in methods:
        line = [m]
        for s in splits:
            sel = [r for r in rows if r["method"] == m and r["split"] == s]
            for k in REPORT_METRICS:
                vals = [float(r[k]) for r in sel if r[k] not in ("", "nan")]
                vals = [v for v in vals if v == v]
                line.append(f"{np.mean(vals):.4f}" if vals else "")
        table.append(line)
    return header, table


def cmd_report(args) -> dict:
    rows = []
    for p in args.inputs:
        with open(p, newline="") as fh:
            rows += list(csv.DictReader(fh))
    if not rows:
        raise UsageError("report: no rows in the given CSV files")
    header, table = comparison_table(rows)
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(table)
    widths = [max(len(str(c)) for c in col) for col in zip(header, *table)]
    for line in [header] + table:
        print("  ".join(str(c).ljust(wd) for c, wd in zip(line, widths)))
    m = RunManifest("report", args.argv, {"inputs": [str(p) for p in args.inputs]}, None,
                    {"table": str(out)})
    return {"manifest": m, "manifest_path": out.with_name(out.stem + ".manifest.json")}


# ---------------------------------------------------------------------------
# parser and dispatch


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="duq", description="Dense uncertainty estimation toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train the main model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("-v", "--verbose", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint (read-only)")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--csv")
    e.add_argument("--maps")
    e.add_argument("--splits", default="test_id,test_ood")

    b = sub.add_parser("baseline", help="train a comparison method")
    b.add_argument("--method", required=True,
                   choices=["mc-dropout", "deep-ensemble", "gan", "cvae",
                            "mc_dropout", "deep_ensemble"])
    b.add_argument("--config")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int)
    b.add_argument("--epochs", type=int)

    c = sub.add_parser("grad-check", help="finite-difference gradient check")
    c.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("report", help="merge per-image CSVs into a comparison table")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--out", required=True)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "baseline": cmd_baseline, "grad-check": cmd_grad_check, "report": cmd_report}


def dispatch(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        args.argv = argv
        t0 = time.perf_counter()
        result = COMMANDS[args.command](args)
        if "manifest" in result:
            man: RunManifest = result["manifest"]
            man.wall_time = time.perf_counter() - t0
            man.write(result["manifest_path"])
        return result.get("exit", 0)
    except (UsageError, ConfigError) as exc:
        print(f"duq: error: {exc}", file=sys.stderr)
        return 1
    except (DuqError, OSError, RuntimeError, KeyError) as exc:
        print(f"duq: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
