"""Ensemble-based conditional latent variable model.

A shared convolutional encoder feeds (a) a conditional prior network that
outputs a Gaussian over the latent code ``z``, (b) a stochastic decoder whose
deepest feature is fused with a spatially broadcast ``z`` and whose last
layer is replicated into ``M`` ensemble heads, and (c) a deterministic decoder
branch.  Latent codes are inferred with unadjusted Langevin dynamics.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, InferenceError, NumericError, UsageError
from .nn import (Conv2d, Dense, Flatten, LeakyReLU, NearestUpsample, ParamStore, RngStream,
                 Sequential, Sigmoid, as_batch, concat_channels, split_channels)


@dataclass
class ElvmConfig:
    image_size: int = 32
    in_channels: int = 1
    enc_channels: tuple[int, int, int] = (16, 32, 64)
    width: int = 16  # channel-reduction width at every scale
    latent_dim: int = 8
    ensemble: int = 5
    prior_channels: int = 16
    shared_trunk: bool = True
    slope: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.enc_channels = tuple(self.enc_channels)
        if self.ensemble < 1:
            raise ConfigError("ensemble size must be >= 1")
        if self.image_size % 32:
            raise ConfigError("image size must be a multiple of 32 (five stride-2 prior convs)")


@dataclass
class LangevinConfig:
    steps: int = 5
    step_size: float = 0.1
    sigma_lik: float = 0.3
    conditional: bool = True
    shared_z: bool = False


@dataclass
class LatentChain:
    """Trajectory ``z_0 .. z_T`` for a batch: ``zs`` has shape (T+1, N, K)."""

    zs: np.ndarray
    log_joint: np.ndarray
    step_size: float
    mu: np.ndarray
    log_var: np.ndarray
    eps: np.ndarray
    accepted: str = "all"

    @property
    def final(self) -> np.ndarray:
        return self.zs[-1]

    def __len__(self):
        return len(self.zs)


def _block(store, name, cin, cout, stride, rng, slope, k=3):
    return Sequential([Conv2d(store, name, cin, cout, k, stride, rng=rng), LeakyReLU(slope)], store)


class Trunk:
    """Multi-scale decoder: nearest upsampling + conv with skip connections."""

    def __init__(self, store, name, width, in_channels, rng, slope):
        self.t3 = _block(store, f"{name}.t3", width, width, 1, rng, slope)
        self.t2 = _block(store, f"{name}.t2", 2 * width, width, 1, rng, slope)
        self.t1 = _block(store, f"{name}.t1", 2 * width, width, 1, rng, slope)
        self.t0 = _block(store, f"{name}.t0", width + in_channels, width, 1, rng, slope)
        self.up = NearestUpsample(2)

    def forward(self, r3, r2, r1, x):
        a3, c3 = self.t3.forward(r3)
        u2, cu2 = self.up.forward(a3)
        i2, s2 = concat_channels([u2, r2])
        a2, c2 = self.t2.forward(i2)
        u1, cu1 = self.up.forward(a2)
        i1, s1 = concat_channels([u1, r1])
        a1, c1 = self.t1.forward(i1)
        u0, cu0 = self.up.forward(a1)
        i0, s0 = concat_channels([u0, x])
        a0, c0 = self.t0.forward(i0)
        return a0, (c3, cu2, s2, c2, cu1, s1, c1, cu0, s0, c0)

    def backward(self, cache, g, grads):
        c3, cu2, s2, c2, cu1, s1, c1, cu0, s0, c0 = cache
        g_u0, _ = split_channels(self.t0.backward(c0, g, grads), s0)
        g_a1 = self.up.backward(cu0, g_u0, grads)
        g_u1, g_r1 = split_channels(self.t1.backward(c1, g_a1, grads), s1)
        g_a2 = self.up.backward(cu1, g_u1, grads)
        g_u2, g_r2 = split_channels(self.t2.backward(c2, g_a2, grads), s2)
        g_a3 = self.up.backward(cu2, g_u2, grads)
        g_r3 = self.t3.backward(c3, g_a3, grads)
        return g_r3, g_r2, g_r1


class Encoder:
    """Three stride-2 conv blocks, each followed by a channel-reduction conv."""

    def __init__(self, store, name, in_channels, channels, width, rng, slope):
        self.stages, self.reduce = [], []
        cin = in_channels
        for i, c in enumerate(channels):
            self.stages.append(_block(store, f"{name}.stage{i}", cin, c, 2, rng, slope))
            self.reduce.append(_block(store, f"{name}.reduce{i}", c, width, 1, rng, slope))
            cin = c

    def forward(self, x, rng=None, dropout=None):
        h, feats, caches = x, [], []
        for i, (stage, red) in enumerate(zip(self.stages, self.reduce)):
            h, cs = stage.forward(h)
            hd, cd = (h, None) if dropout is None else dropout.forward(h, rng=rng)
            r, cr = red.forward(hd)
            feats.append(r)
            caches.append((cs, cd, cr))
        return feats, caches

    def backward(self, caches, g_feats, grads, dropout=None):
        g_h = None
        for i in reversed(range(len(self.stages))):
            cs, cd, cr = caches[i]
            g = self.reduce[i].backward(cr, g_feats[i], grads)
            if dropout is not None:
                g = dropout.backward(cd, g, grads)
            if g_h is not None:
                g = g + g_h
            g_h = self.stages[i].backward(cs, g, grads)
        return g_h


class PriorNet:
    """Five stride-2 convs then two dense heads for the Gaussian mean and log-variance."""

    def __init__(self, store, name, in_channels, channels, latent_dim, image_size, rng, slope):
        convs, cin = [], in_channels
        for i in range(5):
            convs += [Conv2d(store, f"{name}.conv{i}", cin, channels, 3, 2, rng=rng), LeakyReLU(slope)]
            cin = channels
        self.body = Sequential(convs + [Flatten()], store)
        flat = channels * (image_size // 32) ** 2
        self.mu = Dense(store, f"{name}.mu", flat, latent_dim, rng)
        self.log_var = Dense(store, f"{name}.log_var", flat, latent_dim, rng)

    def forward(self, x):
        h, cb = self.body.forward(x)
        mu, cm = self.mu.forward(h)
        lv, cl = self.log_var.forward(h)
        return mu, lv, (cb, cm, cl)

    def backward(self, cache, g_mu, g_lv, grads):
        cb, cm, cl = cache
        g = self.mu.backward(cm, g_mu, grads) + self.log_var.backward(cl, g_lv, grads)
        return self.body.backward(cb, g, grads)


class Elvm:
    """Parameters live in ``self.store`` (theta).  Uncertainty heads are separate objects."""

    def __init__(self, cfg: ElvmConfig | None = None):
        self.cfg = cfg = cfg or ElvmConfig()
        self.store = ParamStore()
        rng = RngStream(cfg.seed, 1).generator()
        w, k, s = cfg.width, cfg.latent_dim, cfg.slope
        self.encoder = Encoder(self.store, "enc", cfg.in_channels, cfg.enc_channels, w, rng, s)
        self.prior_net = PriorNet(self.store, "prior", cfg.in_channels, cfg.prior_channels, k,
                                  cfg.image_size, rng, s)
        self.zfuse = _block(self.store, "zfuse", w + k, w, 1, rng, s)
        self.trunk = Trunk(self.store, "trunk", w, cfg.in_channels, rng, s)
        self.det_trunk = self.trunk if cfg.shared_trunk else Trunk(self.store, "det_trunk", w,
                                                                   cfg.in_channels, rng, s)
        self.heads = [Conv2d(self.store, f"cls{m}", w, 1, 1, rng=rng) for m in range(cfg.ensemble)]
        self.det_head = Conv2d(self.store, "cls_det", w, 1, 1, rng=rng)
        self.sigmoid = Sigmoid()
        self.counts: Counter = Counter()

    # -- building blocks -------------------------------------------------

    def encode(self, x):
        x = as_batch(x)
        feats, cache = self.encoder.forward(x)
        return feats, cache

    def prior(self, x):
        mu, lv, _ = self.prior_net.forward(as_batch(x))
        return mu, lv

    def prior_sample(self, x, rng: np.random.Generator, eps: np.ndarray | None = None):
        """Reparameterised draw ``z0 = mu + exp(log_var / 2) * eps``."""
        mu, lv = self.prior(x)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(lv))):
            raise InferenceError("prior net produced non-finite moments")
        eps = rng.standard_normal(mu.shape) if eps is None else np.broadcast_to(eps, mu.shape)
        return mu + np.exp(lv / 2) * eps, mu, lv

    def _fuse(self, r3, z):
        n, _, h, w = r3.shape
        zmap = np.broadcast_to(z[:, :, None, None], (n, z.shape[1], h, w))
        inp, sizes = concat_channels([r3, zmap])
        out, c = self.zfuse.forward(inp)
        return out, (c, sizes)

    def _fuse_backward(self, cache, g, grads):
        c, sizes = cache
        g_r3, g_zmap = split_channels(self.zfuse.backward(c, g, grads), sizes)
        return g_r3, g_zmap.sum((2, 3))

    def _stochastic_features(self, feats, x, z):
        """Decoder activations for rows of ``z``; ``feats``/``x`` are tiled to match."""
        r1, r2, r3 = feats
        reps = z.shape[0] // r3.shape[0]
        if reps > 1:
            r1, r2, r3, x = (np.tile(a, (reps, 1, 1, 1)) for a in (r1, r2, r3, x))
        f3, cf = self._fuse(r3, z)
        d0, ct = self.trunk.forward(f3, r2, r1, x)
        return d0, (cf, ct, reps)

    def _stochastic_features_backward(self, cache, g_d0, grads):
        cf, ct, reps = cache
        g_f3, g_r2, g_r1 = self.trunk.backward(ct, g_d0, grads)
        g_r3, g_z = self._fuse_backward(cf, g_f3, grads)

        def fold(a):
            return a.reshape(reps, -1, *a.shape[1:]).sum(0) if reps > 1 else a

        return [fold(g_r1), fold(g_r2), fold(g_r3)], g_z

    def _head(self, head, d0):
        logit, ch = head.forward(d0)
        p, cs = self.sigmoid.forward(logit)
        return p, (ch, cs)

    def _head_backward(self, head, cache, g, grads):
        ch, cs = cache
        return head.backward(ch, self.sigmoid.backward(cs, g, grads), grads)

    # -- public forward passes --------------------------------------------

    def forward_stochastic(self, x, z, head: int | None = None):
        """Prediction of ensemble head ``head`` (1-based), or all heads stacked (M, N, 1, H, W)."""
        if head is not None and not 1 <= head <= self.cfg.ensemble:
            raise UsageError(f"head index {head} outside 1..{self.cfg.ensemble}")
        x = as_batch(x)
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if z.shape[1] != self.cfg.latent_dim:
            raise UsageError(f"z must have dimension {self.cfg.latent_dim}")
        feats, _ = self.encode(x)
        d0, _ = self._stochastic_features(feats, x, z)
        self.counts["stochastic"] += x.shape[0]
        heads = self.heads if head is None else [self.heads[head - 1]]
        out = np.stack([self._head(h, d0)[0] for h in heads])
        if not np.all(np.isfinite(out)):
            raise InferenceError("non-finite stochastic prediction")
        return out if head is None else out[0]

    def forward_deterministic(self, x):
        x = as_batch(x)
        (r1, r2, r3), _ = self.encode(x)
        d0, _ = self.det_trunk.forward(r3, r2, r1, x)
        self.counts["deterministic"] += x.shape[0]
        p = self._head(self.det_head, d0)[0]
        if not np.all(np.isfinite(p)):
            raise InferenceError("non-finite deterministic prediction")
        return p

    def predict(self, x, rng: np.random.Generator):
        """Single-pass inference: one prior draw, one stochastic pass, one deterministic pass.

        Returns ``(deterministic, stochastic_mean, per_head)``.
        """
        x = as_batch(x)
        feats, _ = self.encode(x)
        z, _, _ = self.prior_sample(x, rng)
        d0, _ = self._stochastic_features(feats, x, z)
        self.counts["stochastic"] += x.shape[0]
        per_head = np.stack([self._head(h, d0)[0] for h in self.heads])
        r1, r2, r3 = feats
        dd, _ = self.det_trunk.forward(r3, r2, r1, x)
        self.counts["deterministic"] += x.shape[0]
        det = self._head(self.det_head, dd)[0]
        if not (np.all(np.isfinite(per_head)) and np.all(np.isfinite(det))):
            raise InferenceError("non-finite prediction")
        return det, per_head.mean(0), per_head

    # -- Langevin support ----------------------------------------------------

    def generator(self, x, feats=None):
        """Callable ``z -> (ensemble-mean prediction, pullback)`` with encoder features frozen."""
        x = as_batch(x)
        if feats is None:
            feats, _ = self.encode(x)
        scratch = self.store.zero_grads()

        def gen(z):
            d0, cache = self._stochastic_features(feats, x, z)
            outs = [self._head(h, d0) for h in self.heads]
            fbar = sum(o[0] for o in outs) / len(outs)

            def pullback(g):
                g_d0 = sum(self._head_backward(h, o[1], g / len(outs), scratch)
                           for h, o in zip(self.heads, outs))
                return self._stochastic_features_backward(cache, g_d0, scratch)[1]

            return fbar, pullback

        return gen

    # -- training support ----------------------------------------------------

    def forward_train(self, x, z_heads: np.ndarray, enc=None):
        """Head ``m`` sees ``z_heads[m]``.  Returns per-head preds (M, N, 1, H, W), det pred, cache."""
        x = as_batch(x)
        n = x.shape[0]
        m = self.cfg.ensemble
        feats, enc_cache = enc if enc is not None else self.encode(x)
        d0, sc = self._stochastic_features(feats, x, z_heads.reshape(m * n, -1))
        outs = [self._head(self.heads[i], d0[i * n:(i + 1) * n]) for i in range(m)]
        preds = np.stack([o[0] for o in outs])
        r1, r2, r3 = feats
        dd, dc = self.det_trunk.forward(r3, r2, r1, x)
        det, hc = self._head(self.det_head, dd)
        return preds, det, (enc_cache, sc, [o[1] for o in outs], dc, hc, n)

    def backward_train(self, cache, g_preds, g_det, grads):
        """Accumulate theta gradients; returns the gradient w.r.t. each head's z (M, N, K)."""
        enc_cache, sc, head_caches, dc, hc, n = cache
        m = self.cfg.ensemble
        g_d0 = np.concatenate([self._head_backward(self.heads[i], head_caches[i], g_preds[i], grads)
                               for i in range(m)])
        g_feats, g_z = self._stochastic_features_backward(sc, g_d0, grads)
        g_dd = self._head_backward(self.det_head, hc, g_det, grads)
        g_r3, g_r2, g_r1 = self.det_trunk.backward(dc, g_dd, grads)
        g_feats = [g_feats[0] + g_r1, g_feats[1] + g_r2, g_feats[2] + g_r3]
        self.encoder.backward(enc_cache, g_feats, grads)
        return g_z.reshape(m, n, -1)

    def det_features(self, x):
        """Deterministic-branch decoder activations (before the head) with their cache."""
        x = as_batch(x)
        feats, enc_cache = self.encode(x)
        r1, r2, r3 = feats
        dd, dc = self.det_trunk.forward(r3, r2, r1, x)
        return dd, (enc_cache, dc)

    def det_features_backward(self, cache, g_dd, grads):
        enc_cache, dc = cache
        g_r3, g_r2, g_r1 = self.det_trunk.backward(dc, g_dd, grads)
        self.encoder.backward(enc_cache, [g_r1, g_r2, g_r3], grads)

    def config_dict(self) -> dict:
        return asdict(self.cfg)


# ---------------------------------------------------------------------------
# Langevin dynamics


def log_joint(y, f, z, mu, log_var, sigma_lik) -> np.ndarray:
    """Per-sample ``log p(y, z | x)`` up to an additive constant."""
    n = z.shape[0]
    lik = -0.5 * np.sum(((y - f) ** 2).reshape(n, -1), axis=1) / sigma_lik ** 2
    pri = -0.5 * np.sum((z - mu) ** 2 / np.exp(log_var) + log_var, axis=1)
    return lik + pri


def langevin_step(gen, y, z, cfg: LangevinConfig, rng: np.random.Generator,
                  mu=None, log_var=None, noise: np.ndarray | None = None):
    """One unadjusted Langevin update of the batch ``z`` toward p(z | x, y).

    ``gen(z)`` must return the prediction and a pullback computing J^T g.
    With ``cfg.conditional`` the prior gradient is that of N(mu, exp(log_var));
    otherwise it is the standard-normal ``z``.
    """
    if cfg.step_size < 0 or cfg.sigma_lik <= 0:
        raise UsageError("step size must be >= 0 and sigma_lik > 0")
    if cfg.step_size == 0:
        return z.copy()
    f, pullback = gen(z)
    g_lik = pullback((y - f) / cfg.sigma_lik ** 2)
    if cfg.conditional and mu is not None:
        prior_grad = (z - mu) / np.exp(log_var)
    else:
        prior_grad = z
    eta = rng.standard_normal(z.shape) if noise is None else noise
    s = cfg.step_size
    z_next = z + 0.5 * s * s * (g_lik - prior_grad) + s * eta
    if not np.all(np.isfinite(z_next)):
        raise NumericError("non-finite Langevin update")
    return z_next


def infer_latent(model, x, y, cfg: LangevinConfig, rng: np.random.Generator, enc_feats=None) -> LatentChain:
    """Draw ``z0`` from the model's prior then run ``cfg.steps`` Langevin updates."""
    x, y = as_batch(x), as_batch(y)
    mu, lv = model.prior(x)
    if not cfg.conditional:
        mu, lv = np.zeros_like(mu), np.zeros_like(lv)
    eps = rng.standard_normal(mu.shape)
    z = mu + np.exp(lv / 2) * eps
    gen = model.generator(x, enc_feats) if enc_feats is not None else model.generator(x)
    zs, lj = [z], []
    pmu, plv = mu, lv
    for t in range(cfg.steps):
        f, _ = gen(z)
        lj.append(log_joint(y, f, z, pmu, plv, cfg.sigma_lik))
        try:
            z = langevin_step(gen, y, z, cfg, rng, pmu, plv)
        except NumericError as exc:
            raise NumericError(f"Langevin chain diverged at step {t}") from exc
        zs.append(z)
    f, _ = gen(z)
    lj.append(log_joint(y, f, z, pmu, plv, cfg.sigma_lik))
    return LatentChain(np.stack(zs), np.stack(lj), cfg.step_size, mu, lv, eps)


def heads_latents(chain: LatentChain, ensemble: int, shared_z: bool) -> np.ndarray:
    """Pick a latent per head: the final state for all, or the last ``ensemble`` states."""
    if shared_z:
        return np.broadcast_to(chain.final, (ensemble,) + chain.final.shape).copy()
    t = len(chain) - 1
    idx = [max(0, t - ensemble + 1 + m) for m in range(ensemble)]
    return chain.zs[idx].copy()


class LinearGaussianModel:
    """Scalar generator ``f = a z + b`` with a standard-normal prior (conjugate test bed)."""

    def __init__(self, a: float, b: float):
        self.store = ParamStore()
        self.layer = Dense(self.store, "lin", 1, 1, np.random.default_rng(0))
        self.store["lin.weight"] = np.array([[a]])
        self.store["lin.bias"] = np.array([b])
        self.a, self.b = a, b

    def prior(self, x):
        n = len(x)
        return np.zeros((n, 1)), np.zeros((n, 1))

    def generator(self, x):
        scratch = self.store.zero_grads()

        def gen(z):
            f, cache = self.layer.forward(z)
            return f, lambda g: self.layer.backward(cache, g, scratch)

        return gen

    def posterior(self, y: float) -> tuple[float, float]:
        a, b = self.a, self.b
        return a * (y - b) / (a * a + 1), 1.0 / (a * a + 1)
