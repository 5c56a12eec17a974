"""Comparison uncertainty estimators: MC dropout, deep ensemble, GAN and CVAE.

Every baseline yields a set of sampled predictions per image; the
entropy / mutual-information decomposition turns that set into predictive,
aleatoric and epistemic maps.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .bench import SplitData
from .elvm import Elvm, ElvmConfig, Encoder, PriorNet, Trunk
from .errors import ConfigError, FormatError, NumericError, UsageError
from .formats import decode_checkpoint, encode_checkpoint, load_into
from .metrics import aggregate
from .nn import (Conv2d, Dropout, LeakyReLU, ParamStore, RngStream, Sequential, Sigmoid, adam_step,
                 as_batch, concat_channels)
from .trainer import (LOG_COLUMNS, EvalResult, ImageOutput, TrainLog, image_report, lr_schedule,
                      map_ordered)
from .uncertainty import bce_map, bce_map_grad, binary_entropy, ce_loss

METHODS = ("mc_dropout", "deep_ensemble", "gan", "cvae")
_SHUFFLE, _NOISE, _EVAL = 50, 51, 52


def method_name(name: str) -> str:
    """Accept both ``mc-dropout`` and ``mc_dropout`` spellings."""
    m = name.replace("-", "_")
    if m not in METHODS:
        raise UsageError(f"unknown baseline method {name!r}; choose from {', '.join(METHODS)}")
    return m


# ---------------------------------------------------------------------------
# sample sets and their decomposition


@dataclass
class SampledPredictions:
    """Predictions from repeated stochastic passes, stacked as (N, ...)."""

    samples: np.ndarray
    source: str

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.source not in METHODS:
            raise UsageError(f"unknown sample source {self.source!r}")

    def __len__(self):
        return len(self.samples)

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(0)


def ensemble_decompose(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(H[mean p], mean H[p], their difference)`` per pixel, in bits."""
    arr = samples.samples if isinstance(samples, SampledPredictions) else np.asarray(samples, float)
    if arr.ndim == 0 or len(arr) == 0:
        raise UsageError("ensemble_decompose needs a nonempty sample set")
    if len(arr) < 2:
        raise UsageError("ensemble_decompose needs at least two samples")
    # pixels where every sample agrees skip the averaging so their residual is exactly 0
    same = np.ptp(arr, axis=0) == 0
    predictive = binary_entropy(np.where(same, arr[0], arr.mean(0)))
    aleatoric = np.where(same, predictive, binary_entropy(arr).mean(0))
    return predictive, aleatoric, predictive - aleatoric


# ---------------------------------------------------------------------------
# adversarial and variational losses


def cvae_kl(mu_post, logvar_post, mu_prior, logvar_prior):
    """Per-sample ``KL(N(mu_post, e^lv_post) || N(mu_prior, e^lv_prior))`` summed over dimensions."""
    arrs = [np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in
            (mu_post, logvar_post, mu_prior, logvar_prior)]
    if len({a.shape for a in arrs}) != 1:
        raise UsageError("cvae_kl: moment vectors must share one shape")
    mp, lp, mq, lq = arrs
    return 0.5 * np.sum((np.exp(lp) + (mp - mq) ** 2) / np.exp(lq) - 1 + lq - lp, axis=1)


def cvae_kl_grads(mu_post, logvar_post, mu_prior, logvar_prior):
    """Gradients of the summed KL with respect to (mu_post, logvar_post, mu_prior, logvar_prior)."""
    mp, lp, mq, lq = mu_post, logvar_post, mu_prior, logvar_prior
    inv = np.exp(-lq)
    d = mp - mq
    return d * inv, 0.5 * (np.exp(lp) * inv - 1), -d * inv, 0.5 * (1 - (np.exp(lp) + d * d) * inv)


def cvae_loss(rec_loss: float, mu_post, logvar_post, mu_prior, logvar_prior) -> float:
    """Reconstruction loss plus the batch-mean KL(posterior || prior)."""
    return float(rec_loss + cvae_kl(mu_post, logvar_post, mu_prior, logvar_prior).mean())


class Discriminator:
    """Fully convolutional critic over ``concat(x, map)``: four stride-2 convs then a 1x1 score."""

    def __init__(self, store: ParamStore, in_channels: int, width: int = 16, slope: float = 0.01,
                 rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        layers, cin = [], in_channels + 1
        for i in range(4):
            layers += [Conv2d(store, f"disc.conv{i}", cin, width, 3, 2, rng=rng), LeakyReLU(slope)]
            cin = width
        layers += [Conv2d(store, "disc.out", cin, 1, 1, rng=rng), Sigmoid()]
        self.store = store
        self.net = Sequential(layers, store)

    def forward(self, x, m):
        inp, sizes = concat_channels([as_batch(x), as_batch(m)])
        out, cache = self.net.forward(inp)
        return out, (cache, sizes)

    def backward(self, cache, g, grads):
        """Returns the gradient with respect to the map input."""
        c, sizes = cache
        gi = self.net.backward(c, g, grads)
        return gi[:, sizes[0]:]


def gan_losses(pred, y, disc, lam: float = 0.1, x=None, with_grads: bool = False):
    """``L_gen = BCE(pred, y) + lam * CE(g(pred), 1)``, ``L_dis = CE(g(pred), 0) + CE(g(y), 1)``.

    ``disc`` is either a :class:`Discriminator` (then ``x`` is required) or a
    callable mapping a map to its score map.  With ``with_grads`` also
    returns the generator's gradient w.r.t. ``pred`` and the discriminator
    parameter gradients of ``L_dis`` (prediction treated as a constant).
    """
    pred, y = as_batch(pred), as_batch(y)
    rec = float(bce_map(pred, y).mean())
    if isinstance(disc, Discriminator):
        if x is None:
            raise UsageError("gan_losses: the discriminator needs the input image")
        gp, cp = disc.forward(x, pred)
        gy, cy = disc.forward(x, y)
    else:
        gp, gy, cp, cy = disc(pred), disc(y), None, None
    l_adv, g_adv = ce_loss(gp, np.ones_like(gp))
    l_fake, g_fake = ce_loss(gp, np.zeros_like(gp))
    l_real, g_real = ce_loss(gy, np.ones_like(gy))
    l_gen = rec + lam * l_adv if lam else rec
    l_dis = l_fake + l_real
    if not with_grads:
        return l_gen, l_dis
    if not isinstance(disc, Discriminator):
        raise UsageError("gradients need a Discriminator instance")
    g_pred = bce_map_grad(pred, y) / pred.size
    if lam:
        scratch = disc.store.zero_grads()
        g_pred = g_pred + lam * disc.backward(cp, g_adv, scratch)
    d_grads = disc.store.zero_grads()
    disc.backward(cp, g_fake, d_grads)
    disc.backward(cy, g_real, d_grads)
    return l_gen, l_dis, g_pred, d_grads


# ---------------------------------------------------------------------------
# configs and model state


@dataclass
class BaselineConfig:
    method: str = "mc_dropout"
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    decay_point: float = 0.8
    decay_factor: float = 0.9
    dropout_rate: float = 0.3
    passes: int = 10
    members: int = 5
    gan_lambda: float = 0.1
    latent_dim: int = 8
    width: int = 16
    seed: int = 0

    def __post_init__(self):
        self.method = method_name(self.method)
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.passes < 1 or self.members < 1:
            raise ConfigError("passes and members must be >= 1")
        if not 0.0 < self.decay_point < 1.0 or not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError("bad learning-rate decay settings")

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "BaselineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class EnsembleNet:
    """Shared encoder with ``members`` full decoders (trunk + 1x1 head each)."""

    def __init__(self, store: ParamStore, cfg: ElvmConfig, members: int, rng):
        self.store = store
        self.encoder = Encoder(store, "enc", cfg.in_channels, cfg.enc_channels, cfg.width, rng, cfg.slope)
        self.trunks = [Trunk(store, f"trunk{k}", cfg.width, cfg.in_channels, rng, cfg.slope)
                       for k in range(members)]
        self.heads = [Conv2d(store, f"cls{k}", cfg.width, 1, 1, rng=rng) for k in range(members)]
        self.sigmoid = Sigmoid()

    def forward(self, x):
        feats, ec = self.encoder.forward(x)
        r1, r2, r3 = feats
        outs, caches = [], []
        for t, h in zip(self.trunks, self.heads):
            d, tc = t.forward(r3, r2, r1, x)
            logit, hc = h.forward(d)
            p, sc = self.sigmoid.forward(logit)
            outs.append(p)
            caches.append((tc, hc, sc))
        return np.stack(outs), (ec, caches)

    def backward(self, cache, g, grads):
        ec, caches = cache
        g_feats = None
        for k, (tc, hc, sc) in enumerate(caches):
            gd = self.heads[k].backward(hc, self.sigmoid.backward(sc, g[k], grads), grads)
            g3, g2, g1 = self.trunks[k].backward(tc, gd, grads)
            g_feats = [g1, g2, g3] if g_feats is None else [a + b for a, b in zip(g_feats, [g1, g2, g3])]
        self.encoder.backward(ec, g_feats, grads)


class BaselineState:
    def __init__(self, cfg: BaselineConfig, image_size: int = 32, in_channels: int = 1):
        self.cfg = cfg
        self.elvm_cfg = ElvmConfig(image_size=image_size, in_channels=in_channels, width=cfg.width,
                                   latent_dim=cfg.latent_dim, ensemble=1, seed=cfg.seed)
        rng = RngStream(cfg.seed, 4).generator()
        self.model = None
        self.ensemble = None
        self.disc = None
        self.posterior = None
        self.aux = ParamStore()
        if cfg.method == "deep_ensemble":
            self.ensemble = EnsembleNet(ParamStore(), self.elvm_cfg, cfg.members, rng)
        else:
            self.model = Elvm(self.elvm_cfg)
        if cfg.method == "gan":
            self.disc = Discriminator(self.aux, in_channels, cfg.width, rng=rng)
        if cfg.method == "cvae":
            self.posterior = PriorNet(self.aux, "post", in_channels + 1, self.elvm_cfg.prior_channels,
                                      cfg.latent_dim, image_size, rng, self.elvm_cfg.slope)
        self.dropout = Dropout(cfg.dropout_rate)

    @property
    def main_store(self) -> ParamStore:
        return self.ensemble.store if self.ensemble is not None else self.model.store

    def stores(self) -> dict[str, ParamStore]:
        return {"theta": self.main_store, "aux": self.aux}

    def header(self) -> dict:
        return {"format": "duq-checkpoint", "method": self.cfg.method,
                "baseline_config": asdict(self.cfg), "elvm_config": asdict(self.elvm_cfg),
                "seed": self.cfg.seed}

    def to_bytes(self) -> bytes:
        return encode_checkpoint(self.header(), self.stores())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "BaselineState":
        header, blocks = decode_checkpoint(buf)
        if header.get("method") not in METHODS:
            raise FormatError(f"checkpoint method {header.get('method')!r} is not a baseline")
        cfg = BaselineConfig.from_dict(header["baseline_config"])
        ec = header["elvm_config"]
        state = cls(cfg, ec["image_size"], ec["in_channels"])
        for name, store in state.stores().items():
            load_into(store, blocks[name])
        return state


def load_baseline(path) -> BaselineState:
    return BaselineState.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# forward helpers on the shared model


def _dropout_forward(model: Elvm, x, drop: Dropout, rng):
    feats, ec = model.encoder.forward(x, rng=rng, dropout=drop)
    r1, r2, r3 = feats
    dd, dc = model.det_trunk.forward(r3, r2, r1, x)
    p, hc = model._head(model.det_head, dd)
    return p, (ec, dc, hc)


def _dropout_backward(model: Elvm, cache, g, grads, drop: Dropout):
    ec, dc, hc = cache
    g_dd = model._head_backward(model.det_head, hc, g, grads)
    g3, g2, g1 = model.det_trunk.backward(dc, g_dd, grads)
    model.encoder.backward(ec, [g1, g2, g3], grads, dropout=drop)


def _latent_forward(model: Elvm, x, z):
    feats, ec = model.encode(x)
    d0, sc = model._stochastic_features(feats, x, z)
    p, hc = model._head(model.heads[0], d0)
    return p, (ec, sc, hc)


def _latent_backward(model: Elvm, cache, g, grads):
    ec, sc, hc = cache
    g_d0 = model._head_backward(model.heads[0], hc, g, grads)
    g_feats, g_z = model._stochastic_features_backward(sc, g_d0, grads)
    model.encoder.backward(ec, g_feats, grads)
    return g_z


def mc_dropout_predict(state, x, passes: int = 10, rate: float | None = None,
                       rng: np.random.Generator | None = None) -> SampledPredictions:
    """``passes`` forward passes with independent dropout masks after each encoder feature."""
    if passes < 1:
        raise UsageError("passes must be >= 1")
    model = state.model if isinstance(state, BaselineState) else state
    if rate is None:
        rate = state.cfg.dropout_rate if isinstance(state, BaselineState) else 0.3
    rng = rng if rng is not None else np.random.default_rng(0)
    drop = Dropout(rate)
    x = as_batch(x)
    out = [_dropout_forward(model, x, drop, rng)[0] for _ in range(passes)]
    return SampledPredictions(np.stack(out), "mc_dropout")


def sample_predictions(state: BaselineState, x, rng: np.random.Generator) -> SampledPredictions:
    cfg = state.cfg
    x = as_batch(x)
    if cfg.method == "mc_dropout":
        return mc_dropout_predict(state, x, cfg.passes, cfg.dropout_rate, rng)
    if cfg.method == "deep_ensemble":
        # members are deterministic, so each member is one sample
        return SampledPredictions(state.ensemble.forward(x)[0], "deep_ensemble")
    model = state.model
    out = []
    for _ in range(cfg.passes):
        if cfg.method == "gan":
            z = rng.standard_normal((x.shape[0], cfg.latent_dim))
        else:
            z, _, _ = model.prior_sample(x, rng)
        out.append(_latent_forward(model, x, z)[0])
    return SampledPredictions(np.stack(out), cfg.method)


# ---------------------------------------------------------------------------
# training


def _bce(p, y):
    return float(bce_map(p, y).mean()), bce_map_grad(p, y) / p.size


def baseline_step(state: BaselineState, x, y, lr: float, rng: np.random.Generator) -> dict:
    cfg = state.cfg
    store = state.main_store
    grads = store.zero_grads()
    parts = {}
    if cfg.method == "mc_dropout":
        p, cache = _dropout_forward(state.model, x, state.dropout, rng)
        parts["L_rec"], g = _bce(p, y)
        _dropout_backward(state.model, cache, g, grads, state.dropout)
    elif cfg.method == "deep_ensemble":
        preds, cache = state.ensemble.forward(x)
        parts["L_rec"], g = _bce(preds, y[None])
        state.ensemble.backward(cache, g * len(preds), grads)
    elif cfg.method == "gan":
        z = rng.standard_normal((x.shape[0], cfg.latent_dim))
        p, cache = _latent_forward(state.model, x, z)
        l_gen, l_dis, g_p, d_grads = gan_losses(p, y, state.disc, cfg.gan_lambda, x=x, with_grads=True)
        parts.update(L_gen=l_gen, L_dis=l_dis)
        _latent_backward(state.model, cache, g_p, grads)
        adam_step(state.aux, d_grads, lr)
    else:
        model = state.model
        mu_q, lv_q, qcache = model.prior_net.forward(x)
        inp, _ = concat_channels([x, y])
        mu_p, lv_p, pcache = state.posterior.forward(inp)
        eps = rng.standard_normal(mu_p.shape)
        z = mu_p + np.exp(lv_p / 2) * eps
        p, cache = _latent_forward(model, x, z)
        rec, g = _bce(p, y)
        parts["L_rec"] = rec
        parts["L_kl"] = float(cvae_kl(mu_p, lv_p, mu_q, lv_q).mean())
        g_z = _latent_backward(model, cache, g, grads)
        n = x.shape[0]
        gmp, glp, gmq, glq = (a / n for a in cvae_kl_grads(mu_p, lv_p, mu_q, lv_q))
        model.prior_net.backward(qcache, gmq, glq, grads)
        a_grads = state.aux.zero_grads()
        state.posterior.backward(pcache, gmp + g_z, glp + g_z * eps * np.exp(lv_p / 2) / 2, a_grads)
        adam_step(state.aux, a_grads, lr)
    bad = [k for k, v in parts.items() if not math.isfinite(v)]
    if bad:
        raise NumericError(f"non-finite baseline loss {bad}: {parts}")
    adam_step(store, grads, lr)
    return parts


def infer_baseline_image(state: BaselineState, x, rng: np.random.Generator) -> ImageOutput:
    s = sample_predictions(state, x, rng)
    pred_u, ale_u, epi_u = ensemble_decompose(s.samples[:, 0])
    return ImageOutput(s.mean[0], ale_u, np.maximum(epi_u, 0.0), epi_u, pred_u)


def evaluate_baseline(state: BaselineState, split: SplitData, seed: int | None = None,
                      keep_outputs: bool = False, workers: int = 1) -> EvalResult:
    """Per-image metrics of the sample mean; uncertainty is the predictive entropy."""
    stream = RngStream(state.cfg.seed if seed is None else seed, _EVAL)

    def one(i):
        out = infer_baseline_image(state, split.images[i:i + 1], stream.generator(i))
        return image_report(split.files[i], out, split.labels[i]), out

    results = map_ordered(one, len(split), workers)
    images = [r[0] for r in results]
    outputs = [r[1] for r in results] if keep_outputs else []
    return EvalResult(aggregate(images, dataset=split.name, method=state.cfg.method), images, outputs)


def train_baseline(cfg: BaselineConfig, train_split: SplitData, val_split: SplitData | None = None,
                   out_dir=None, progress=None) -> tuple[BaselineState, TrainLog]:
    n, c, h, w = train_split.images.shape
    state = BaselineState(cfg, h, c)
    log = TrainLog()
    shuffle, noise = RngStream(cfg.seed, _SHUFFLE), RngStream(cfg.seed, _NOISE)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(cfg, epoch)
        order = shuffle.generator(epoch).permutation(n)
        total, nb = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(order[start:start + cfg.batch_size])
            parts = baseline_step(state, train_split.images[idx], train_split.labels[idx], lr,
                                  noise.generator(epoch, b))
            total += parts.get("L_rec", parts.get("L_gen", 0.0))
            nb += 1
        row = dict.fromkeys(LOG_COLUMNS, 0.0)
        row.update(epoch=epoch, lr=lr, L_d=total / nb)
        if val_split is not None:
            rep = evaluate_baseline(state, val_split).report
            row.update(val_mae=rep.mae, val_f_beta=rep.f_beta, val_ece_d=rep.ece_d)
        else:
            row.update(val_mae=float("nan"), val_f_beta=float("nan"), val_ece_d=float("nan"))
        log.append(row, time.perf_counter() - t0)
        if progress is not None:
            progress(row)
    for s in state.stores().values():
        s.round_to_float32()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "model.duqc").write_bytes(state.to_bytes())
        log.write(out / "train_log.csv")
    return state, log
