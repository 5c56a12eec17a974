"""Uncertainty heads, attenuated task losses, consistency losses and the
aleatoric / predictive / epistemic decomposition.

Maps are handled as batched arrays ``(N, 1, H, W)``.  Normalisation is
per sample.  Loss functions return ``(value, gradient)`` pairs where the
gradient is taken with respect to the first (trainable) argument.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import InferenceError, UsageError
from .nn import (BatchNorm, BilinearUpsample, Conv2d, LeakyReLU, NearestUpsample, ParamStore,
                 RngStream, Sequential, TensorMap, as_batch, concat_channels)

LOG_CLAMP = 1e-7
BCE_EPS = 1e-12


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, TensorMap) else np.asarray(x, dtype=np.float64)


def _same_shape(*xs):
    shapes = {np.shape(x) for x in xs}
    if len(shapes) != 1:
        raise UsageError(f"shape mismatch: {sorted(shapes)}")


# ---------------------------------------------------------------------------
# elementwise pieces


def binary_entropy(p):
    """Per-pixel entropy in bits; returns the same container type as its input."""
    arr = _arr(p)
    if np.any(arr < -1e-9) or np.any(arr > 1 + 1e-9):
        raise UsageError("binary_entropy: values outside [0, 1]")
    q = np.clip(arr, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(q > 0, q * np.log2(q), 0.0) + np.where(q < 1, (1 - q) * np.log2(1 - q), 0.0))
    return TensorMap(h) if isinstance(p, TensorMap) else h


def bce_map(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-pixel binary cross-entropy of prediction ``p`` against target ``y``."""
    return -(y * np.log(np.maximum(p, BCE_EPS)) + (1 - y) * np.log(np.maximum(1 - p, BCE_EPS)))


def bce_map_grad(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    return -y / np.maximum(p, BCE_EPS) + (1 - y) / np.maximum(1 - p, BCE_EPS)


def minmax_norm(v):
    """Per-sample ``(v - min) / (max - min)``; constant maps become zeros."""
    arr = _arr(v)
    single = arr.ndim <= 3
    b = arr.reshape(1, -1) if single else arr.reshape(arr.shape[0], -1)
    lo, hi = b.min(1, keepdims=True), b.max(1, keepdims=True)
    rng = hi - lo
    out = np.where(rng > 0, (b - lo) / np.where(rng > 0, rng, 1.0), 0.0).reshape(arr.shape)
    return TensorMap(out) if isinstance(v, TensorMap) else out


def minmax_norm_backward(v: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(g * minmax_norm(v))`` with respect to ``v`` (batched)."""
    n = v.shape[0]
    b, gb = v.reshape(n, -1), g.reshape(n, -1)
    lo_i, hi_i = b.argmin(1), b.argmax(1)
    rows = np.arange(n)
    lo, hi = b[rows, lo_i][:, None], b[rows, hi_i][:, None]
    r = hi - lo
    safe = np.where(r > 0, r, 1.0)
    u = (b - lo) / safe
    out = gb / safe
    out[rows, lo_i] += ((gb * (u - 1)).sum(1) / safe[:, 0])
    out[rows, hi_i] += (-(gb * u).sum(1) / safe[:, 0])
    out[r[:, 0] <= 0] = 0.0
    return out.reshape(v.shape)


def _log_clamped(a):
    return np.log(np.maximum(a, LOG_CLAMP))


def _dlog_clamped(a):
    return np.where(a > LOG_CLAMP, 1.0 / np.maximum(a, LOG_CLAMP), 0.0)


def ce_loss(u, t):
    """Mean ``-[t log u + (1 - t) log(1 - u)]`` with logs clamped at 1e-7; gradient w.r.t. ``u``."""
    u, t = _arr(u), _arr(t)
    _same_shape(u, t)
    val = -(t * _log_clamped(u) + (1 - t) * _log_clamped(1 - u))
    grad = -(t * _dlog_clamped(u) - (1 - t) * _dlog_clamped(1 - u)) / u.size
    return float(val.mean()), grad


def bice_loss(u, t):
    """Bi-directional cross-entropy ``CE(u; t) + CE(t; u)``.

    The returned gradient flows through ``u`` in its prediction role only;
    in the reverse term ``u`` acts as a target and is held constant.  The
    gradient therefore vanishes at ``u = t``, whereas the loss value itself
    is minimised elsewhere when ``t != 0.5``.
    """
    u, t = _arr(u), _arr(t)
    _same_shape(u, t)
    for name, a in (("u", u), ("t", t)):
        if np.any(a < -1e-9) or np.any(a > 1 + 1e-9):
            raise UsageError(f"bice_loss: {name} outside [0, 1]")
    forward_val, g1 = ce_loss(u, t)
    reverse = -(u * _log_clamped(t) + (1 - u) * _log_clamped(1 - t))
    return forward_val + float(reverse.mean()), g1


# ---------------------------------------------------------------------------
# task losses


def attenuated_loss(pred, target, s=None, mode: str = "regression", sigma_sq=None,
                    with_grads: bool = False):
    """Uncertainty-attenuated per-pixel BCE, averaged over pixels.

    regression:     L / (2 sigma^2) + log sigma          with sigma^2 = exp(s)
    classification: L / T + log T                        with T = exp(sigma^2)

    Pass either the log-variance ``s`` or ``sigma_sq`` directly.  With
    ``with_grads`` returns ``(loss, d/dpred, d/ds)``; ``d/ds`` is None when
    ``sigma_sq`` was given (it is then treated as a constant).
    """
    p, y = _arr(pred), _arr(target)
    if (s is None) == (sigma_sq is None):
        raise UsageError("give exactly one of s or sigma_sq")
    var = np.exp(_arr(s)) if s is not None else _arr(sigma_sq)
    if var.shape != p.shape:
        try:
            var = np.broadcast_to(var, p.shape)
        except ValueError as exc:
            raise UsageError(f"shape mismatch: {var.shape} vs {p.shape}") from exc
    _same_shape(p, y)
    L = bce_map(p, y)
    n = p.size
    if mode == "regression":
        w = 1.0 / (2.0 * var)
        log_sigma = 0.5 * np.log(var) if s is None else 0.5 * np.broadcast_to(_arr(s), p.shape)
        loss = float(np.mean(w * L + log_sigma))
        g_s = (-L * w + 0.5) / n if s is not None else None
    elif mode == "classification":
        w = np.exp(-var)
        loss = float(np.mean(w * L + var))
        g_s = (-var * w * L + var) / n if s is not None else None
    else:
        raise UsageError(f"unknown loss mode {mode!r}")
    if not with_grads:
        return loss
    return loss, w * bce_map_grad(p, y) / n, g_s


def optimal_prediction(preds, y):
    """Per pixel, the ensemble member with the lowest BCE against ``y`` (lowest index on ties)."""
    stack = np.stack([_arr(p) for p in preds]) if isinstance(preds, (list, tuple)) else _arr(preds)
    if stack.shape[0] == 0:
        raise UsageError("optimal_prediction needs at least one prediction")
    yy = _arr(y)
    if stack.shape[1:] != yy.shape:
        raise UsageError(f"shape mismatch: {stack.shape[1:]} vs {yy.shape}")
    idx = bce_map(stack, yy[None]).argmin(0)
    out = np.take_along_axis(stack, idx[None], 0)[0]
    return TensorMap(out) if isinstance(y, TensorMap) else out


def mean_error(preds, y):
    """``(mean_m preds_m - y)^2`` per pixel."""
    stack = np.stack([_arr(p) for p in preds]) if isinstance(preds, (list, tuple)) else _arr(preds)
    yy = _arr(y)
    if stack.shape[1:] != yy.shape:
        raise UsageError(f"shape mismatch: {stack.shape[1:]} vs {yy.shape}")
    err = (stack.mean(0) - yy) ** 2
    return TensorMap(err) if isinstance(y, TensorMap) else err


# ---------------------------------------------------------------------------
# heads


@dataclass
class HeadsConfig:
    aleatoric_width: int = 16
    predictive_width: int = 64
    predictive_strides: tuple[int, ...] = (2, 1, 2, 1, 2)
    in_channels: int = 1
    slope: float = 0.01
    seed: int = 0


class UncertaintyHeads:
    """Aleatoric head (alpha, image only) and predictive head (beta, image + prediction).

    Both emit log-variances ``s``; the uncertainty maps are ``minmax_norm(exp(s))``.
    """

    def __init__(self, cfg: HeadsConfig | None = None):
        self.cfg = cfg = cfg or HeadsConfig()
        self.alpha, self.beta = ParamStore(), ParamStore()
        rng = RngStream(cfg.seed, 2).generator()
        w, c, sl = cfg.aleatoric_width, cfg.in_channels, cfg.slope
        a = self.alpha
        self.aleatoric_net = Sequential([
            Conv2d(a, "a.conv0", c, w, 3, 1, rng=rng), LeakyReLU(sl),
            Conv2d(a, "a.conv1", w, 2 * w, 3, 2, rng=rng), LeakyReLU(sl),
            Conv2d(a, "a.conv2", 2 * w, 2 * w, 3, 2, rng=rng), LeakyReLU(sl),
            NearestUpsample(2),
            Conv2d(a, "a.conv3", 2 * w, w, 3, 1, rng=rng), LeakyReLU(sl),
            NearestUpsample(2),
            Conv2d(a, "a.conv4", w, w, 3, 1, rng=rng), LeakyReLU(sl),
            Conv2d(a, "a.out", w, 1, 3, 1, rng=rng),
        ], a)
        pw, b = cfg.predictive_width, self.beta
        layers, cin = [], c + 1
        strides = cfg.predictive_strides
        for i, st in enumerate(strides[:-1]):
            layers += [Conv2d(b, f"p.conv{i}", cin, pw, 3, st, rng=rng), LeakyReLU(sl),
                       BatchNorm(b, f"p.bn{i}", pw)]
            cin = pw
        layers.append(Conv2d(b, f"p.conv{len(strides) - 1}", cin, 1, 3, strides[-1], rng=rng))
        layers.append(BilinearUpsample(int(np.prod(strides))))
        self.predictive_net = Sequential(layers, b)
        self.counts: Counter = Counter()

    def aleatoric_s(self, x, train: bool = False):
        x = as_batch(x)
        self.counts["aleatoric"] += x.shape[0]
        return self.aleatoric_net.forward(x, train)

    def predictive_s(self, x, pred, train: bool = False):
        inp, _ = concat_channels([as_batch(x), as_batch(pred)])
        self.counts["predictive"] += inp.shape[0]
        return self.predictive_net.forward(inp, train)


def _uncertainty_map(s):
    e = np.exp(np.minimum(s, 50.0))
    return minmax_norm(e), e


def aleatoric_consistency_loss(heads: UncertaintyHeads, x, f_star, train: bool = True):
    """``bice(minmax(exp(s_a)), minmax(H[f*]))``.  Returns ``(loss, alpha gradients)``."""
    s, cache = heads.aleatoric_s(x, train)
    u, e = _uncertainty_map(s)
    target = minmax_norm(binary_entropy(np.clip(as_batch(f_star), 0, 1)))
    loss, g_u = bice_loss(u, target)
    g_s = minmax_norm_backward(e, g_u) * e
    grads = heads.alpha.zero_grads()
    heads.aleatoric_net.backward(cache, g_s, grads)
    return loss, grads


def predictive_targets(preds, y):
    """Min-max normalised entropy of the mean prediction and of the mean error."""
    stack = _arr(preds)
    pbar = stack.mean(0)
    return minmax_norm(binary_entropy(np.clip(pbar, 0, 1))), minmax_norm(mean_error(stack, _arr(y)))


def predictive_consistency_loss(heads: UncertaintyHeads, x, preds, y, stochastic_pred=None,
                                train: bool = True):
    """``bice(U_p, minmax(H[mean pred])) + CE(U_p, minmax(err))``.

    ``U_p`` is computed from the image and ``stochastic_pred`` (default: the
    mean of ``preds``).  Returns ``(loss, beta gradients, U_p)``.
    """
    stack = _arr(preds)
    if stack.shape[0] == 0:
        raise UsageError("predictive_consistency_loss needs predictions")
    sp = stack.mean(0) if stochastic_pred is None else _arr(stochastic_pred)
    s, cache = heads.predictive_s(x, sp, train)
    u, e = _uncertainty_map(s)
    t_ent, t_err = predictive_targets(stack, y)
    l1, g1 = bice_loss(u, t_ent)
    l2, g2 = ce_loss(u, t_err)
    g_s = minmax_norm_backward(e, g1 + g2) * e
    grads = heads.beta.zero_grads()
    heads.predictive_net.backward(cache, g_s, grads)
    return l1 + l2, grads, u


# ---------------------------------------------------------------------------
# decomposition


@dataclass
class UncertaintyBundle:
    aleatoric: np.ndarray
    predictive: np.ndarray
    epistemic_raw: np.ndarray

    @property
    def epistemic(self) -> np.ndarray:
        return np.maximum(self.epistemic_raw, 0.0)

    def maps(self, i: int = 0) -> dict[str, TensorMap]:
        return {
            "aleatoric": TensorMap(self.aleatoric[i]),
            "epistemic": TensorMap(self.epistemic[i]),
            "predictive": TensorMap(self.predictive[i]),
        }


def decompose(heads: UncertaintyHeads, x, stochastic_pred) -> UncertaintyBundle:
    """Single-pass uncertainty from one stochastic prediction and two head passes."""
    s_a, _ = heads.aleatoric_s(x, train=False)
    s_p, _ = heads.predictive_s(x, stochastic_pred, train=False)
    if not (np.all(np.isfinite(s_a)) and np.all(np.isfinite(s_p))):
        raise InferenceError("uncertainty heads produced non-finite output")
    ua, _ = _uncertainty_map(s_a)
    up, _ = _uncertainty_map(s_p)
    return UncertaintyBundle(ua, up, up - ua)
