"""Small differentiable core: dense maps, a fixed layer catalog with analytic
backward passes, Adam, and seeded random streams.

Everything runs at float64.  Activations are batched ``(N, C, H, W)`` arrays
(or ``(N, D)`` for dense layers); :class:`TensorMap` is the single-map
container used at module boundaries and in file formats.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, NumericError, UsageError


# ---------------------------------------------------------------------------
# containers


class TensorMap:
    """A ``C x H x W`` float field.  Rejects NaN/Inf on construction."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ConfigError(f"TensorMap needs a 2-D or 3-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("TensorMap data contains non-finite values")
        self.data = arr

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "TensorMap":
        return cls(np.zeros((channels, height, width)))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def flat(self) -> np.ndarray:
        """Channel-major, row-major values."""
        return self.data.reshape(-1)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, TensorMap):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"TensorMap(C={self.channels}, H={self.height}, W={self.width})"


def as_batch(x) -> np.ndarray:
    """Accept a TensorMap, a list of them, or an array and return an N x C x H x W array."""
    if isinstance(x, TensorMap):
        return x.data[None]
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], TensorMap):
        return np.stack([t.data for t in x])
    return np.asarray(x, dtype=np.float64)


class ParamStore:
    """Named parameter blocks in registration order, plus Adam state.

    Non-learnable blocks (batch-norm running statistics) live in the same
    ordered mapping so that checkpoints capture them, but receive no moments.
    """

    def __init__(self):
        self.blocks: dict[str, np.ndarray] = {}
        self.learnable: dict[str, bool] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray, learnable: bool = True) -> str:
        if name in self.blocks:
            raise ConfigError(f"duplicate parameter block {name!r}")
        value = np.array(value, dtype=np.float64)
        self.blocks[name] = value
        self.learnable[name] = learnable
        if learnable:
            self.m[name] = np.zeros_like(value)
            self.v[name] = np.zeros_like(value)
        return name

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blocks[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if value.shape != self.blocks[name].shape:
            raise ConfigError(f"block {name!r}: shape {value.shape} != {self.blocks[name].shape}")
        self.blocks[name] = np.array(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self.blocks

    def names(self, learnable_only: bool = False) -> list[str]:
        return [n for n in self.blocks if self.learnable[n] or not learnable_only]

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {n: np.zeros_like(b) for n, b in self.blocks.items() if self.learnable[n]}

    def num_params(self) -> int:
        return sum(b.size for n, b in self.blocks.items() if self.learnable[n])

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for n, b in self.blocks.items():
            other.add(n, b.copy(), self.learnable[n])
            if self.learnable[n]:
                other.m[n] = self.m[n].copy()
                other.v[n] = self.v[n].copy()
        other.step = self.step
        return other

    def round_to_float32(self) -> None:
        """Snap every block to the nearest float32 value (what checkpoints store)."""
        for n in self.blocks:
            self.blocks[n] = self.blocks[n].astype(np.float32).astype(np.float64)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(b)) for b in self.blocks.values())


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def accumulate(grads: dict[str, np.ndarray], name: str, value: np.ndarray) -> None:
    grads[name] = grads[name] + value if name in grads else value.copy()


# ---------------------------------------------------------------------------
# randomness


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream keyed by (master seed, stream id)."""

    seed: int
    stream_id: int = 0

    def generator(self, *keys: int) -> np.random.Generator:
        entropy = [int(self.seed) & 0xFFFFFFFFFFFFFFFF, int(self.stream_id) & 0xFFFFFFFFFFFFFFFF]
        entropy += [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def sub(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, (self.stream_id * 1_000_003 + stream_id + 1) & 0xFFFFFFFFFFFFFFFF)


# ---------------------------------------------------------------------------
# layer catalog


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    kind = "layer"

    def forward(self, x: np.ndarray, train: bool = False, rng=None):
        raise NotImplementedError

    def backward(self, cache, gy: np.ndarray, grads: dict) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, train=False, rng=None):
        return self.forward(x, train, rng)[0]


class Dense(Layer):
    kind = "dense"

    def __init__(self, store: ParamStore, name: str, in_features: int, out_features: int, rng):
        self.store = store
        self.in_features, self.out_features = in_features, out_features
        self.w = store.add(f"{name}.weight",
                           glorot_uniform(rng, (out_features, in_features), in_features, out_features))
        self.b = store.add(f"{name}.bias", np.zeros(out_features))

    def forward(self, x, train=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ConfigError(f"dense expects (N, {self.in_features}), got {x.shape}")
        return x @ self.store[self.w].T + self.store[self.b], x

    def backward(self, cache, gy, grads):
        x = cache
        accumulate(grads, self.w, gy.T @ x)
        accumulate(grads, self.b, gy.sum(0))
        return gy @ self.store[self.w]


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, store: ParamStore, name: str, in_channels: int, out_channels: int,
                 kernel_size: int = 3, stride: int = 1, padding: int | None = None, rng=None):
        if kernel_size % 2 != 1:
            raise ConfigError(f"conv2d kernel size must be odd, got {kernel_size}")
        if stride < 1:
            raise ConfigError(f"conv2d stride must be >= 1, got {stride}")
        self.store = store
        self.cin, self.cout, self.k, self.stride = in_channels, out_channels, kernel_size, stride
        self.pad = kernel_size // 2 if padding is None else padding
        kk = kernel_size * kernel_size
        self.w = store.add(f"{name}.weight",
                           glorot_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size),
                                          in_channels * kk, out_channels * kk))
        self.b = store.add(f"{name}.bias", np.zeros(out_channels))

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        return ((h + 2 * self.pad - self.k) // self.stride + 1,
                (w + 2 * self.pad - self.k) // self.stride + 1)

    def _cols(self, x):
        # columns laid out (C*k*k, N*Ho*Wo) so forward and both backward products are single GEMMs
        n, c, h, w = x.shape
        p, k, s = self.pad, self.k, self.stride
        xt = x.transpose(1, 0, 2, 3)
        if p:
            xt = np.pad(xt, ((0, 0), (0, 0), (p, p), (p, p)))
        ho, wo = self.out_size(h, w)
        cols = np.empty((c, k, k, n, ho, wo))
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xt[:, :, i:i + s * ho:s, j:j + s * wo:s]
        return cols.reshape(c * k * k, n * ho * wo), ho, wo

    def forward(self, x, train=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ConfigError(f"conv2d expects (N, {self.cin}, H, W), got {x.shape}")
        cols, ho, wo = self._cols(x)
        w2 = self.store[self.w].reshape(self.cout, -1)
        y = w2 @ cols + self.store[self.b][:, None]
        y = y.reshape(self.cout, x.shape[0], ho, wo).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(y), (cols, x.shape, ho, wo)

    def backward(self, cache, gy, grads):
        cols, xshape, ho, wo = cache
        n, c, h, w = xshape
        k, s, p = self.k, self.stride, self.pad
        g2 = gy.transpose(1, 0, 2, 3).reshape(self.cout, n * ho * wo)
        accumulate(grads, self.w, (g2 @ cols.T).reshape(self.store[self.w].shape))
        accumulate(grads, self.b, g2.sum(1))
        w2 = self.store[self.w].reshape(self.cout, -1)
        gcols = (w2.T @ g2).reshape(c, k, k, n, ho, wo)
        gxp = np.zeros((c, n, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, i, j]
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return np.ascontiguousarray(gx.transpose(1, 0, 2, 3))


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, slope: float = 0.01):
        self.slope = slope

    def forward(self, x, train=False, rng=None):
        pos = x > 0
        return np.where(pos, x, self.slope * x), pos

    def backward(self, cache, gy, grads):
        return np.where(cache, gy, self.slope * gy)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        pos = x > 0
        return np.where(pos, x, 0.0), pos

    def backward(self, cache, gy, grads):
        return np.where(cache, gy, 0.0)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train=False, rng=None):
        y = expit(x)
        return y, y

    def backward(self, cache, gy, grads):
        return gy * cache * (1.0 - cache)


class BatchNorm(Layer):
    """Batch normalisation over (N, H, W) per channel, or over N for dense inputs."""

    kind = "batch_norm"

    def __init__(self, store: ParamStore, name: str, channels: int, momentum: float = 0.1,
                 eps: float = 1e-5):
        self.store = store
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = store.add(f"{name}.gamma", np.ones(channels))
        self.beta = store.add(f"{name}.beta", np.zeros(channels))
        self.running_mean = store.add(f"{name}.running_mean", np.zeros(channels), learnable=False)
        self.running_var = store.add(f"{name}.running_var", np.ones(channels), learnable=False)

    def _axes(self, x):
        if x.shape[1] != self.channels:
            raise ConfigError(f"batch_norm expects {self.channels} channels, got {x.shape}")
        return (0, 2, 3) if x.ndim == 4 else (0,)

    def _bcast(self, v, x):
        return v.reshape((1, -1, 1, 1) if x.ndim == 4 else (1, -1))

    def forward(self, x, train=False, rng=None):
        axes = self._axes(x)
        if train:
            mu = x.mean(axes)
            var = x.var(axes)
            count = x.size // self.channels
            m = self.momentum
            self.store.blocks[self.running_mean] = (1 - m) * self.store[self.running_mean] + m * mu
            unbiased = var * count / max(count - 1, 1)
            self.store.blocks[self.running_var] = (1 - m) * self.store[self.running_var] + m * unbiased
        else:
            mu, var = self.store[self.running_mean], self.store[self.running_var]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mu, x)) * self._bcast(inv_std, x)
        y = xhat * self._bcast(self.store[self.gamma], x) + self._bcast(self.store[self.beta], x)
        return y, (xhat, inv_std, axes, train)

    def backward(self, cache, gy, grads):
        xhat, inv_std, axes, train = cache
        accumulate(grads, self.gamma, (gy * xhat).sum(axes))
        accumulate(grads, self.beta, gy.sum(axes))
        gxhat = gy * self._bcast(self.store[self.gamma], gy)
        if not train:
            return gxhat * self._bcast(inv_std, gy)
        n = gy.size // self.channels
        s1 = self._bcast(gxhat.sum(axes), gy)
        s2 = self._bcast((gxhat * xhat).sum(axes), gy)
        return self._bcast(inv_std, gy) / n * (n * gxhat - s1 - xhat * s2)


class NearestUpsample(Layer):
    kind = "nearest_upsample"

    def __init__(self, factor: int = 2):
        self.factor = factor

    def forward(self, x, train=False, rng=None):
        f = self.factor
        return x.repeat(f, axis=2).repeat(f, axis=3), x.shape

    def backward(self, cache, gy, grads):
        n, c, h, w = cache
        f = self.factor
        return gy.reshape(n, c, h, f, w, f).sum((3, 5))


def _bilinear_matrix(size_in: int, factor: int) -> np.ndarray:
    # half-pixel centres, edge-clamped
    size_out = size_in * factor
    a = np.zeros((size_out, size_in))
    for o in range(size_out):
        src = (o + 0.5) / factor - 0.5
        src = min(max(src, 0.0), size_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, size_in - 1)
        t = src - lo
        a[o, lo] += 1 - t
        a[o, hi] += t
    return a


class BilinearUpsample(Layer):
    kind = "bilinear_upsample"

    def __init__(self, factor: int):
        self.factor = factor
        self._mats: dict[int, np.ndarray] = {}

    def _mat(self, size):
        if size not in self._mats:
            self._mats[size] = _bilinear_matrix(size, self.factor)
        return self._mats[size]

    def forward(self, x, train=False, rng=None):
        ah, aw = self._mat(x.shape[2]), self._mat(x.shape[3])
        return np.einsum("ih,nchw,jw->ncij", ah, x, aw, optimize=True), (ah, aw)

    def backward(self, cache, gy, grads):
        ah, aw = cache
        return np.einsum("ih,ncij,jw->nchw", ah, gy, aw, optimize=True)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, gy, grads):
        return gy.reshape(cache)


class Dropout(Layer):
    """Inverted dropout.  Active whenever a generator is supplied."""

    kind = "dropout"

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if rng is None or self.rate == 0.0:
            return x, None
        keep = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * keep, keep

    def backward(self, cache, gy, grads):
        return gy if cache is None else gy * cache


def concat_channels(xs: Sequence[np.ndarray]):
    return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]


def split_channels(gy: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    return np.split(gy, np.cumsum(sizes)[:-1], axis=1)


# ---------------------------------------------------------------------------
# specs and sequential nets


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one catalog layer."""

    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def build(self, store: ParamStore, name: str, rng) -> Layer:
        p = self.params
        if self.kind == "dense":
            return Dense(store, name, p["in_features"], p["out_features"], rng)
        if self.kind == "conv2d":
            return Conv2d(store, name, p["in_channels"], p["out_channels"], p.get("kernel_size", 3),
                          p.get("stride", 1), p.get("padding"), rng)
        if self.kind == "leaky_relu":
            return LeakyReLU(p.get("slope", 0.01))
        if self.kind == "relu":
            return ReLU()
        if self.kind == "sigmoid":
            return Sigmoid()
        if self.kind == "batch_norm":
            return BatchNorm(store, name, p["channels"], p.get("momentum", 0.1))
        if self.kind == "nearest_upsample":
            return NearestUpsample(p.get("factor", 2))
        if self.kind == "bilinear_upsample":
            return BilinearUpsample(p.get("factor", 2))
        if self.kind == "flatten":
            return Flatten()
        if self.kind == "dropout":
            return Dropout(p.get("rate", 0.5))
        raise ConfigError(f"unknown layer kind {self.kind!r}")


class Sequential:
    """A chain of catalog layers sharing one ParamStore."""

    def __init__(self, layers: Sequence[Layer], store: ParamStore,
                 input_shape: tuple[int, ...] | None = None):
        self.layers = list(layers)
        self.store = store
        self.input_shape = input_shape

    @classmethod
    def from_specs(cls, specs: Sequence[LayerSpec], store: ParamStore, prefix: str, rng,
                   input_shape=None) -> "Sequential":
        layers = [s.build(store, f"{prefix}.{i}", rng) for i, s in enumerate(specs)]
        return cls(layers, store, input_shape)

    def forward(self, x, train: bool = False, rng=None):
        x = as_batch(x)
        if self.input_shape is not None and tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ConfigError(f"layer 0: input shape {x.shape[1:]} != declared {self.input_shape}")
        caches = []
        for i, layer in enumerate(self.layers):
            try:
                x, c = layer.forward(x, train, rng)
            except ConfigError as exc:
                raise ConfigError(f"layer {i} ({layer.kind}): {exc}") from exc
            caches.append(c)
        return x, caches

    def backward(self, caches, gy, grads):
        if len(caches) != len(self.layers):
            raise RuntimeError("stale or mismatched cache for backward")
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            gy = layer.backward(c, gy, grads)
        return gy

    def __call__(self, x, train=False, rng=None):
        return self.forward(x, train, rng)[0]


def forward(net: Sequential, x, train: bool = False, rng=None):
    """Run ``net`` on ``x``; returns ``(output, cache)``."""
    return net.forward(x, train, rng)


def backward(net: Sequential, cache, output_gradient) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Return ``(param_gradients, input_gradient)`` for a cached forward call."""
    grads = net.store.zero_grads()
    gx = net.backward(cache, as_batch(output_gradient), grads)
    return grads, gx


# ---------------------------------------------------------------------------
# optimisation


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """Bias-corrected Adam update, in place.  Blocks missing from ``grads`` are untouched."""
    for name, g in grads.items():
        if not store.learnable.get(name, False):
            raise UsageError(f"gradient supplied for non-learnable or unknown block {name!r}")
        if g.shape != store[name].shape:
            raise UsageError(f"gradient for {name!r} has shape {g.shape}, expected {store[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in block {name!r}; Adam step aborted")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = store.m[name] = beta1 * store.m[name] + (1 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1 - beta2) * g * g
        store.blocks[name] = store.blocks[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int


def grad_check(net, x, h: float = 1e-5, rng: np.random.Generator | None = None,
               n_coords: int = 256, train: bool = False,
               include_input: bool = True, kink_guard: bool = True,
               scale_floor: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    See :func:`grad_check_report` for the arguments.
    """
    return grad_check_report(net, x, h, rng, n_coords, train, include_input, kink_guard,
                             scale_floor).max_rel_error


def grad_check_report(net, x, h: float = 1e-5, rng: np.random.Generator | None = None,
                      n_coords: int = 256, train: bool = False, include_input: bool = True,
                      kink_guard: bool = True, scale_floor: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    The scalar probed is ``sum(R * net(x))`` for a fixed random ``R``.
    Coordinates are drawn from all learnable blocks and (optionally) the input;
    every coordinate is checked when fewer than ``n_coords`` exist.

    The relative error's denominator is floored at ``scale_floor`` times the
    largest analytic gradient magnitude, so entries many orders below the
    gradient's scale are not judged on float round-off.  With ``kink_guard``
    a coordinate whose differences at ``h`` and ``h/2`` disagree (the probe
    straddles a ReLU-type kink) is skipped and counted.
    """
    if h <= 0:
        raise UsageError("h must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.array(as_batch(x), dtype=np.float64)
    store = net.store
    y, cache = net.forward(x, train)
    proj = rng.standard_normal(y.shape)
    grads = store.zero_grads()
    gx = net.backward(cache, proj, grads)

    def loss(xx):
        out = net.forward(xx, train)[0]
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite output during finite differences")
        return float(np.sum(out * proj))

    coords: list[tuple[str | None, int]] = []
    for name in store.names(learnable_only=True):
        coords += [(name, i) for i in range(store[name].size)]
    if include_input:
        coords += [(None, i) for i in range(x.size)]
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    def central(target, i, step):
        flat = target.reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        lp = loss(x)
        flat[i] = orig - step
        lm = loss(x)
        flat[i] = orig
        return (lp - lm) / (2 * step)

    mags = [float(np.max(np.abs(g))) for g in grads.values() if g.size]
    if include_input:
        mags.append(float(np.max(np.abs(gx))))
    scale = max(mags, default=0.0)
    floor = max(scale_floor * scale, 1e-12)
    worst, checked, skipped = 0.0, 0, 0
    for name, i in coords:
        target = x if name is None else store.blocks[name]
        fd = central(target, i, h)
        an = (gx if name is None else grads[name]).reshape(-1)[i]
        if not np.isfinite(an) or not np.isfinite(fd):
            raise NumericError(f"non-finite gradient at {name or 'input'}[{i}]")
        err = abs(an - fd) / max(abs(an), abs(fd), floor)
        if kink_guard and err > 1e-6:
            fd2 = central(target, i, h / 2)
            if abs(fd - fd2) / max(abs(fd), abs(fd2), floor) > 1e-4:
                skipped += 1
                continue
        checked += 1
        worst = max(worst, err)
    return GradCheckReport(worst, checked, skipped)


class FunctionNet:
    """Adapter giving arbitrary forward/backward closures the Sequential protocol."""

    def __init__(self, store: ParamStore, fwd: Callable, bwd: Callable):
        self.store = store
        self._fwd, self._bwd = fwd, bwd

    def forward(self, x, train=False, rng=None):
        return self._fwd(x, train)

    def backward(self, cache, gy, grads):
        return self._bwd(cache, gy, grads)
