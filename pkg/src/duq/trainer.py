"""Training loop: Langevin inference of latents, then three separate Adam updates.

Per batch the order is: infer ``z`` with the current theta, run the model,
update theta with the task losses, alpha with the aleatoric consistency loss
and beta with the predictive consistency loss.  Each optimiser only ever sees
gradients of its own loss.

Variants
--------
``full``       latent ensemble + deterministic branch + both uncertainty heads.
``base``       deterministic branch only, plain BCE; uncertainty is the entropy
               of the prediction.
``dual_head``  deterministic branch plus a learnable log-variance head trained
               with the attenuated loss alone (no consistency targets).
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .bench import SplitData
from .elvm import Elvm, ElvmConfig, LangevinConfig, heads_latents, infer_latent
from .errors import ConfigError, FormatError, NumericError
from .formats import decode_checkpoint, encode_checkpoint, load_into
from .metrics import CalibrationReport, ImageMetrics, aggregate, image_metrics
from .nn import Conv2d, ParamStore, RngStream, adam_step, grad_norm
from .uncertainty import (HeadsConfig, UncertaintyHeads, aleatoric_consistency_loss,
                          attenuated_loss, binary_entropy, decompose, optimal_prediction,
                          predictive_consistency_loss)

VARIANTS = ("full", "base", "dual_head")
LOG_COLUMNS = ("epoch", "lr", "L_d", "L_s", "L_au", "L_pu", "val_mae", "val_f_beta", "val_ece_d")

# random stream ids
_SHUFFLE, _LANGEVIN, _EVAL = 30, 31, 40


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    decay_point: float = 0.8
    decay_factor: float = 0.9
    langevin_steps: int = 5
    step_size: float = 0.1
    sigma_lik: float = 0.3
    shared_z: bool = False
    conditional: bool = True
    ensemble: int = 5
    latent_dim: int = 8
    width: int = 16
    shared_trunk: bool = True
    loss_mode: str = "classification"
    variant: str = "full"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.decay_point < 1.0:
            raise ConfigError(f"decay_point must lie in (0, 1), got {self.decay_point}")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.ensemble < 1:
            raise ConfigError("ensemble must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.loss_mode not in ("regression", "classification"):
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def langevin(self) -> LangevinConfig:
        return LangevinConfig(self.langevin_steps, self.step_size, self.sigma_lik,
                              self.conditional, self.shared_z)

    def elvm(self, image_size: int, in_channels: int = 1) -> ElvmConfig:
        return ElvmConfig(image_size=image_size, in_channels=in_channels, width=self.width,
                          latent_dim=self.latent_dim, ensemble=self.ensemble,
                          shared_trunk=self.shared_trunk, seed=self.seed)


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr if epoch < cfg.decay_point * cfg.epochs else cfg.lr * cfg.decay_factor


# ---------------------------------------------------------------------------
# state


class TrainState:
    """Model (theta), uncertainty heads (alpha, beta) and, for ``dual_head``, a log-variance head."""

    def __init__(self, cfg: TrainConfig, image_size: int = 32, in_channels: int = 1):
        self.cfg = cfg
        self.model = Elvm(cfg.elvm(image_size, in_channels))
        self.heads = UncertaintyHeads(HeadsConfig(in_channels=in_channels, seed=cfg.seed))
        self.var_head = None
        if cfg.variant == "dual_head":
            rng = RngStream(cfg.seed, 3).generator()
            self.var_head = Conv2d(self.model.store, "var_head", cfg.width, 1, 1, rng=rng)

    def stores(self) -> dict[str, ParamStore]:
        return {"theta": self.model.store, "alpha": self.heads.alpha, "beta": self.heads.beta}

    def round_to_float32(self) -> None:
        for s in self.stores().values():
            s.round_to_float32()

    # -- checkpoints ---------------------------------------------------------

    def header(self, method: str = "duq", extra: dict | None = None) -> dict:
        return {"format": "duq-checkpoint", "method": method, "variant": self.cfg.variant,
                "train_config": asdict(self.cfg), "elvm_config": self.model.config_dict(),
                "heads_config": asdict(self.heads.cfg), "seed": self.cfg.seed, **(extra or {})}

    def to_bytes(self, extra: dict | None = None) -> bytes:
        return encode_checkpoint(self.header(extra=extra), self.stores())

    @classmethod
    def from_bytes(cls, buf: bytes) -> tuple["TrainState", dict]:
        header, blocks = decode_checkpoint(buf)
        if header.get("method", "duq") != "duq":
            raise FormatError(f"checkpoint holds method {header.get('method')!r}, not the main model")
        cfg = TrainConfig.from_dict(header["train_config"])
        ec = header["elvm_config"]
        state = cls(cfg, ec["image_size"], ec["in_channels"])
        for name, store in state.stores().items():
            load_into(store, blocks[name])
        return state, header


def save_checkpoint(state: TrainState, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(state.to_bytes(extra))


def load_checkpoint(path) -> tuple[TrainState, dict]:
    return TrainState.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# one optimisation step


@dataclass
class StepResult:
    L_d: float
    L_s: float = 0.0
    L_au: float = 0.0
    L_pu: float = 0.0
    grad_norms: dict = field(default_factory=dict)
    sigma_sq: np.ndarray | None = None


def _check_finite(parts: dict, diagnostics: dict) -> None:
    bad = [k for k, v in parts.items() if not math.isfinite(v)]
    if bad:
        exc = NumericError(f"non-finite loss ({', '.join(bad)}); parts={parts}")
        exc.diagnostics = {**diagnostics, **{f"loss_{k}": np.array(v) for k, v in parts.items()}}
        raise exc


def _assert_isolated(grads: dict, store: ParamStore, label: str) -> None:
    stray = set(grads) - set(store.blocks)
    if stray:
        raise RuntimeError(f"{label} gradients reached foreign blocks: {sorted(stray)[:3]}")


def full_step(state: TrainState, x, y, lr: float, rng: np.random.Generator,
              update: bool = True, update_heads: bool = True,
              sigma_sq: np.ndarray | None = None) -> StepResult:
    """One batch of the full model.  ``sigma_sq`` overrides the attenuation weights
    (normally the detached U_p), e.g. to hold them fixed across steps."""
    cfg, model, heads = state.cfg, state.model, state.heads
    m = cfg.ensemble
    # inference uses the pre-update theta
    enc = model.encode(x)
    mu, lv, pcache = model.prior_net.forward(x)
    chain = infer_latent(model, x, y, cfg.langevin(), rng, enc_feats=enc[0])
    z_heads = heads_latents(chain, m, cfg.shared_z)
    preds, det, cache = model.forward_train(x, z_heads, enc)

    l_pu, g_beta, u_p = predictive_consistency_loss(heads, x, preds, y)
    f_star = optimal_prediction(preds, y)
    l_au, g_alpha = aleatoric_consistency_loss(heads, x, f_star)

    if sigma_sq is None:
        sigma_sq = u_p
    if cfg.loss_mode == "regression":
        sigma_sq = np.maximum(sigma_sq, 1e-3)
    l_d, g_det, _ = attenuated_loss(det, y, sigma_sq=sigma_sq, mode=cfg.loss_mode, with_grads=True)
    g_preds = np.empty_like(preds)
    l_s = 0.0
    for i in range(m):
        li, gi, _ = attenuated_loss(preds[i], y, sigma_sq=sigma_sq, mode=cfg.loss_mode,
                                    with_grads=True)
        l_s += li / m
        g_preds[i] = gi / m
    parts = {"L_d": l_d, "L_s": l_s, "L_au": l_au, "L_pu": l_pu}
    _check_finite(parts, {"x": x, "z_chain": chain.zs, "log_joint": chain.log_joint})

    grads = model.store.zero_grads()
    g_z = model.backward_train(cache, g_preds, g_det, grads)
    # straight-through: the chain state's gradient is routed to z0 = mu + sigma * eps
    g_z0 = g_z.sum(0)
    model.prior_net.backward(pcache, g_z0, g_z0 * chain.eps * np.exp(lv / 2) / 2, grads)

    _assert_isolated(grads, model.store, "task")
    _assert_isolated(g_alpha, heads.alpha, "aleatoric")
    _assert_isolated(g_beta, heads.beta, "predictive")
    norms = {"theta": grad_norm(grads), "alpha": grad_norm(g_alpha), "beta": grad_norm(g_beta)}
    if update:
        adam_step(model.store, grads, lr)
        if update_heads:
            adam_step(heads.alpha, g_alpha, lr)
            adam_step(heads.beta, g_beta, lr)
    return StepResult(l_d, l_s, l_au, l_pu, norms, sigma_sq)


def base_step(state: TrainState, x, y, lr: float, update: bool = True) -> StepResult:
    model = state.model
    dd, fcache = model.det_features(x)
    p, hcache = model._head(model.det_head, dd)
    l_d, g_p, _ = attenuated_loss(p, y, sigma_sq=np.zeros_like(p), mode="classification",
                                  with_grads=True)
    _check_finite({"L_d": l_d}, {"x": x})
    grads = model.store.zero_grads()
    g_dd = model._head_backward(model.det_head, hcache, g_p, grads)
    model.det_features_backward(fcache, g_dd, grads)
    if update:
        adam_step(model.store, grads, lr)
    return StepResult(l_d, grad_norms={"theta": grad_norm(grads)})


def dual_head_step(state: TrainState, x, y, lr: float, update: bool = True) -> StepResult:
    """Attenuated loss (``cfg.loss_mode``) with a learnable per-pixel log-variance ``s``."""
    model = state.model
    dd, fcache = model.det_features(x)
    p, hcache = model._head(model.det_head, dd)
    s, scache = state.var_head.forward(dd)
    l_d, g_p, g_s = attenuated_loss(p, y, s=s, mode=state.cfg.loss_mode, with_grads=True)
    _check_finite({"L_d": l_d}, {"x": x})
    grads = model.store.zero_grads()
    g_dd = model._head_backward(model.det_head, hcache, g_p, grads)
    g_dd = g_dd + state.var_head.backward(scache, g_s, grads)
    model.det_features_backward(fcache, g_dd, grads)
    if update:
        adam_step(model.store, grads, lr)
    return StepResult(l_d, grad_norms={"theta": grad_norm(grads)})


def train_step(state: TrainState, x, y, lr: float, rng: np.random.Generator,
               update: bool = True) -> StepResult:
    v = state.cfg.variant
    if v == "full":
        return full_step(state, x, y, lr, rng, update)
    if v == "base":
        return base_step(state, x, y, lr, update)
    return dual_head_step(state, x, y, lr, update)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class ImageOutput:
    """Everything evaluation produces for one image (maps are (1, H, W))."""

    prediction: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray
    epistemic_raw: np.ndarray
    predictive: np.ndarray
    sigma_sq: np.ndarray | None = None


def infer_image(state: TrainState, x: np.ndarray, rng: np.random.Generator) -> ImageOutput:
    """Single-pass inference for one image ``(1, C, H, W)``."""
    model = state.model
    v = state.cfg.variant
    if v == "full":
        det, stoch, _ = model.predict(x, rng)
        b = decompose(state.heads, x, stoch)
        return ImageOutput(det[0], b.aleatoric[0], b.epistemic[0], b.epistemic_raw[0],
                           b.predictive[0])
    det = model.forward_deterministic(x)
    h = binary_entropy(det)
    zero = np.zeros_like(h)
    out = ImageOutput(det[0], zero[0], zero[0], zero[0], h[0])
    if v == "dual_head":
        dd, _ = model.det_features(x)
        s, _ = state.var_head.forward(dd)
        out.sigma_sq = np.exp(s[0])
    return out


@dataclass
class EvalResult:
    report: CalibrationReport
    images: list[ImageMetrics]
    outputs: list[ImageOutput]


def map_ordered(fn, n: int, workers: int = 1) -> list:
    """``[fn(0), ..., fn(n - 1)]``, optionally on a thread pool; results keep index order."""
    if workers <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, range(n)))


def image_report(file: str, out: ImageOutput, label) -> ImageMetrics:
    extra = {"aleatoric_mean": float(out.aleatoric.mean()),
             "epistemic_mean": float(out.epistemic.mean()),
             "epistemic_raw_mean": float(out.epistemic_raw.mean()),
             "predictive_mean": float(out.predictive.mean())}
    return image_metrics(file, out.prediction, label, out.predictive, **extra)


def evaluate(state: TrainState, split: SplitData, seed: int | None = None,
             keep_outputs: bool = False, workers: int = 1) -> EvalResult:
    """Per-image metrics against the split's (noisy) labels; image ``i`` uses its own random stream."""
    stream = RngStream(state.cfg.seed if seed is None else seed, _EVAL)

    def one(i):
        out = infer_image(state, split.images[i:i + 1], stream.generator(i))
        return image_report(split.files[i], out, split.labels[i]), out

    results = map_ordered(one, len(split), workers)
    images = [r[0] for r in results]
    outputs = [r[1] for r in results] if keep_outputs else []
    return EvalResult(aggregate(images, dataset=split.name, method=state.cfg.variant), images, outputs)


# ---------------------------------------------------------------------------
# training driver


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)

    def append(self, row: dict, wall: float) -> None:
        if self.rows and row["epoch"] != self.rows[-1]["epoch"] + 1:
            raise RuntimeError("train log epochs must increase by one")
        self.rows.append(row)
        self.wall_times.append(wall)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in LOG_COLUMNS})
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                log.rows.append({k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()})
        return log


def train(cfg: TrainConfig, train_split: SplitData, val_split: SplitData | None = None,
          out_dir=None, progress=None) -> tuple[TrainState, TrainLog]:
    """Train from scratch.  With ``out_dir``, writes ``model.duqc`` and ``train_log.csv`` there.

    Parameters are snapped to float32 at the end so the in-memory state equals
    what the checkpoint stores.
    """
    n, c, h, w = train_split.images.shape
    state = TrainState(cfg, h, c)
    log = TrainLog()
    shuffle = RngStream(cfg.seed, _SHUFFLE)
    lang = RngStream(cfg.seed, _LANGEVIN)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(cfg, epoch)
        order = shuffle.generator(epoch).permutation(n)
        sums = dict.fromkeys(("L_d", "L_s", "L_au", "L_pu"), 0.0)
        n_batches = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(order[start:start + cfg.batch_size])
            x, y = train_split.images[idx], train_split.labels[idx]
            try:
                res = train_step(state, x, y, lr, lang.generator(epoch, b))
            except NumericError as exc:
                if out_dir is not None:
                    Path(out_dir).mkdir(parents=True, exist_ok=True)
                    extra = getattr(exc, "diagnostics", {})
                    np.savez(Path(out_dir) / f"diagnostics_epoch{epoch}_batch{b}.npz",
                             **{"x": x, "y": y, "idx": idx, **extra})
                raise NumericError(f"epoch {epoch} batch {b}: {exc}") from exc
            for k in sums:
                sums[k] += getattr(res, k)
            n_batches += 1
        row = {"epoch": epoch, "lr": lr, **{k: v / n_batches for k, v in sums.items()}}
        if val_split is not None:
            rep = evaluate(state, val_split).report
            row.update(val_mae=rep.mae, val_f_beta=rep.f_beta, val_ece_d=rep.ece_d)
        else:
            row.update(val_mae=float("nan"), val_f_beta=float("nan"), val_ece_d=float("nan"))
        log.append(row, time.perf_counter() - t0)
        if progress is not None:
            progress(row)
    state.round_to_float32()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state, out / "model.duqc")
        log.write(out / "train_log.csv")
    return state, log
