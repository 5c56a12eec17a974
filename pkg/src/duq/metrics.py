"""Dense prediction and calibration metrics: MAE, mean F-measure, dense ECE, binned PAvPU."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .nn import TensorMap

N_ECE_BINS = 12
N_THRESHOLDS = 256
PAVPU_THRESHOLDS = np.arange(1, 11) / 10.0
_ECE_EDGES = np.arange(1, 11) / 10.0


def _map(x) -> np.ndarray:
    arr = x.data if isinstance(x, TensorMap) else np.asarray(x, dtype=np.float64)
    return arr.reshape(-1)


def _pair(s, y):
    s, y = _map(s), _map(y)
    if s.shape != y.shape:
        raise UsageError(f"shape mismatch: {s.shape} vs {y.shape}")
    return s, y


def _check_unit(s):
    if np.any(s < 0) or np.any(s > 1):
        raise UsageError("prediction values must lie in [0, 1]")


def mae(s, y) -> float:
    s, y = _pair(s, y)
    return float(np.mean(np.abs(s - y)))


def f_measure(s, y, beta_sq: float = 0.3) -> float:
    """Mean F-measure over thresholds ``k/255``; a pixel is foreground when ``s > t``.

    Returns NaN (with a warning) when the ground truth has no foreground.
    """
    s, y = _pair(s, y)
    gt = y > 0.5
    if not gt.any():
        warnings.warn("f_measure: all-zero ground truth; image excluded", RuntimeWarning, stacklevel=2)
        return float("nan")
    t = np.arange(N_THRESHOLDS) / 255.0
    pos = s[None, :] > t[:, None]
    tp = (pos & gt).sum(1).astype(float)
    npos = pos.sum(1).astype(float)
    prec = np.divide(tp, npos, out=np.zeros_like(tp), where=npos > 0)
    rec = tp / gt.sum()
    den = beta_sq * prec + rec
    f = np.divide((1 + beta_sq) * prec * rec, den, out=np.zeros_like(tp), where=den > 0)
    return float(f.mean())


@dataclass
class EceBins:
    counts: np.ndarray            # |B_m|
    acc: np.ndarray               # (12, 256) per-threshold accuracies (NaN for empty bins)
    macc: np.ndarray
    conf: np.ndarray
    ece: float


def ece_bin_index(s: np.ndarray) -> np.ndarray:
    """Bin 0 holds s == 0, bin 11 holds s == 1, bins 1..10 split (0, 1) uniformly."""
    # compare against the edges k/10 directly: ceil(10 s) misplaces values like 0.3
    idx = np.searchsorted(_ECE_EDGES, s, side="left") + 1
    idx = np.where(s <= 0, 0, np.minimum(idx, 10))
    return np.where(s >= 1, N_ECE_BINS - 1, idx)


def ece_thresholds() -> np.ndarray:
    # midpoints of 256 equal intervals of [0, 1], so exact 0 and 1 binarise unambiguously
    return (np.arange(N_THRESHOLDS) + 0.5) / N_THRESHOLDS


def ece_dense_bins(s, y) -> EceBins:
    s, y = _pair(s, y)
    _check_unit(s)
    gt = y > 0.5
    t = ece_thresholds()
    correct = (s[:, None] > t[None, :]) == gt[:, None]
    conf_px = np.maximum(s, 1 - s)
    bins = ece_bin_index(s)
    counts = np.bincount(bins, minlength=N_ECE_BINS)
    acc = np.full((N_ECE_BINS, N_THRESHOLDS), np.nan)
    macc = np.full(N_ECE_BINS, np.nan)
    conf = np.full(N_ECE_BINS, np.nan)
    gaps = []
    for m in range(N_ECE_BINS):
        if counts[m] == 0:
            continue
        sel = bins == m
        # integer counts and exactly rounded sums keep the result independent of pixel order
        acc[m] = correct[sel].sum(0) / counts[m]
        macc[m] = math.fsum(acc[m]) / N_THRESHOLDS
        conf[m] = math.fsum(conf_px[sel]) / counts[m]
        gaps.append(counts[m] / s.size * abs(macc[m] - conf[m]))
    return EceBins(counts, acc, macc, conf, math.fsum(gaps))


def ece_dense(s, y) -> float:
    return ece_dense_bins(s, y).ece


@dataclass
class PavpuTable:
    patch_size: int
    thresholds: np.ndarray
    n_ac: np.ndarray
    n_au: np.ndarray
    n_ic: np.ndarray
    n_iu: np.ndarray

    @property
    def per_bin(self) -> np.ndarray:
        total = self.n_ac + self.n_au + self.n_ic + self.n_iu
        return (self.n_ac + self.n_iu) / total

    @property
    def mean(self) -> float:
        return _mean(self.per_bin)


def _as2d(x) -> np.ndarray:
    arr = x.data if isinstance(x, TensorMap) else np.asarray(x, dtype=np.float64)
    return arr.reshape(arr.shape[-2:])


def _patch_means(a: np.ndarray, g: int) -> np.ndarray:
    """Row-major patch means, each an exactly rounded sum divided by the patch area."""
    h, w = a.shape
    blocks = a.reshape(h // g, g, w // g, g).transpose(0, 2, 1, 3).reshape(-1, g * g)
    return np.array([math.fsum(b) / (g * g) for b in blocks])


def patch_stats(s, y, u, patch_size: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Per-patch accuracy (binarised at 0.5) and mean uncertainty."""
    s, y, u = _as2d(s), _as2d(y), _as2d(u)
    if not (s.shape == y.shape == u.shape):
        raise UsageError("pavpu: prediction, label and uncertainty shapes differ")
    g = patch_size
    h, w = s.shape
    ph, pw = (-h) % g, (-w) % g
    if ph or pw:
        warnings.warn(f"pavpu: reflection-padding {h}x{w} to a multiple of {g}", RuntimeWarning,
                      stacklevel=3)
        s, y, u = (np.pad(a, ((0, ph), (0, pw)), mode="reflect") for a in (s, y, u))
    correct = ((s > 0.5) == (y > 0.5)).astype(float)
    return _patch_means(correct, g), _patch_means(u, g)


def pavpu_counts(acc: np.ndarray, unc: np.ndarray, thresholds=PAVPU_THRESHOLDS, patch_size: int = 4):
    """Each threshold acts as both the accuracy and the uncertainty cut."""
    t = np.asarray(thresholds, dtype=float)[:, None]
    accurate = acc[None, :] >= t
    uncertain = unc[None, :] >= t
    return PavpuTable(
        patch_size, np.asarray(thresholds, dtype=float),
        n_ac=(accurate & ~uncertain).sum(1), n_au=(accurate & uncertain).sum(1),
        n_ic=(~accurate & ~uncertain).sum(1), n_iu=(~accurate & uncertain).sum(1),
    )


def pavpu(s, y, u, patch_size: int = 4) -> PavpuTable:
    acc, unc = patch_stats(s, y, u, patch_size)
    return pavpu_counts(acc, unc, PAVPU_THRESHOLDS, patch_size)


# ---------------------------------------------------------------------------
# reports


@dataclass
class ImageMetrics:
    file: str
    mae: float
    f_beta: float
    ece_d: float
    pavpu: float
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"file": self.file, "mae": self.mae, "f_beta": self.f_beta, "ece_d": self.ece_d,
                "pavpu": self.pavpu, **self.extra}


def image_metrics(file: str, s, y, u, patch_size: int = 4, **extra) -> ImageMetrics:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fb = f_measure(s, y)
    return ImageMetrics(file, mae(s, y), fb, ece_dense(s, y), pavpu(s, y, u, patch_size).mean, extra)


@dataclass
class CalibrationReport:
    mae: float
    f_beta: float
    ece_d: float
    pavpu: float
    n_images: int
    n_excluded_f: int
    dataset: str = ""
    method: str = ""
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"mae": self.mae, "f_beta": self.f_beta, "ece_d": self.ece_d, "pavpu": self.pavpu,
                "n_images": self.n_images, "n_excluded_f": self.n_excluded_f,
                "dataset": self.dataset, "method": self.method, **self.extra}


def _mean(values) -> float:
    # exactly rounded sum, so the result does not depend on image order
    return math.fsum(values) / len(values)


def aggregate(images: list[ImageMetrics], dataset: str = "", method: str = "") -> CalibrationReport:
    """Arithmetic means over images; images with undefined F-measure are left out of that mean."""
    if not images:
        raise UsageError("aggregate needs at least one image")
    fb = [m.f_beta for m in images if not math.isnan(m.f_beta)]
    extra_keys = sorted(set().union(*(m.extra.keys() for m in images)))
    extra = {k: _mean([m.extra[k] for m in images if k in m.extra]) for k in extra_keys}
    return CalibrationReport(
        mae=_mean([m.mae for m in images]),
        f_beta=_mean(fb) if fb else float("nan"),
        ece_d=_mean([m.ece_d for m in images]),
        pavpu=_mean([m.pavpu for m in images]),
        n_images=len(images), n_excluded_f=len(images) - len(fb),
        dataset=dataset, method=method, extra=extra,
    )
