"""Procedural camouflage-style segmentation benchmark with a known label-noise field.

Each sample is a single-channel textured image holding one object whose
intensity differs from the background by a small contrast gap.  Label pixels
near the object boundary flip with a known probability (the ground-truth
aleatoric field).  A held-out split breaks the training distribution's shape
and centre-location biases.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, UsageError
from .formats import read_dmap, write_dmap
from .nn import RngStream, TensorMap

SHAPES = ("disk", "square", "triangle", "crescent")
SPLITS = ("train", "val", "test_id", "test_ood")
MAX_RETRIES = 8


@dataclass
class BenchConfig:
    image_size: int = 32
    contrast: float = 0.25
    texture_amplitude: float = 0.1
    band: float = 3.0
    rho_max: float = 0.4
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    n_ood: int = 50
    radius_range: tuple[float, float] = (5.0, 9.0)
    train_offset_std: float = 2.0
    # OOD rule: a sample is OOD iff it has the held-out shape and/or sits far from centre.
    ood_shape: str | None = "crescent"
    ood_min_offset: float | None = 6.0
    ood_max_offset: float = 9.0
    seed: int = 0

    def __post_init__(self):
        self.radius_range = tuple(self.radius_range)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.rho_max <= 0.5:
            raise ConfigError(f"rho_max must lie in [0, 0.5], got {self.rho_max}")
        if self.contrast < 0:
            raise ConfigError("contrast must be >= 0")
        if min(self.n_train, self.n_val, self.n_test, self.n_ood) <= 0:
            raise ConfigError("split counts must be positive")
        if self.ood_shape is not None and self.ood_shape not in SHAPES:
            raise ConfigError(f"unknown shape class {self.ood_shape!r}")
        if self.ood_shape is None and self.ood_min_offset is None:
            raise ConfigError("the OOD rule needs a held-out shape or a minimum offset")
        if self.band <= 0:
            raise ConfigError("band must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test_id": self.n_test, "test_ood": self.n_ood}

    def split_of(self, index: int) -> tuple[str, int]:
        """Map a global sample index to (split, local index)."""
        if index < 0:
            raise UsageError("index must be non-negative")
        for name, n in self.split_sizes().items():
            if index < n:
                return name, index
            index -= n
        raise UsageError("index beyond the last split")

    def split_range(self, split: str) -> range:
        start = 0
        for name, n in self.split_sizes().items():
            if name == split:
                return range(start, start + n)
            start += n
        raise UsageError(f"unknown split {split!r}")


@dataclass
class SyntheticSample:
    image: TensorMap
    clean_mask: TensorMap
    noisy_label: TensorMap
    noise_field: TensorMap
    shape_class: str
    center_offset: tuple[float, float]
    ood: bool
    index: int = 0
    split: str = "train"


def _shape_mask(shape: str, size: int, center, radius: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - center[0], xx - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    ry, rx = ca * dy - sa * dx, sa * dy + ca * dx
    if shape == "disk":
        return dy ** 2 + dx ** 2 <= radius ** 2
    if shape == "square":
        half = 0.85 * radius
        return (np.abs(ry) <= half) & (np.abs(rx) <= half)
    if shape == "triangle":
        # equilateral triangle with circumradius ~1.2 r: intersection of three half-planes
        r_in = 0.6 * radius
        inside = np.ones_like(ry, dtype=bool)
        for k in range(3):
            th = 2 * np.pi * k / 3
            inside &= (np.cos(th) * ry + np.sin(th) * rx) <= r_in
        return inside
    if shape == "crescent":
        outer = dy ** 2 + dx ** 2 <= radius ** 2
        cy, cx = 0.5 * radius * ca, 0.5 * radius * sa
        inner = (dy - cy) ** 2 + (dx - cx) ** 2 <= (0.8 * radius) ** 2
        return outer & ~inner
    raise ConfigError(f"unknown shape class {shape!r}")


def boundary_distance(mask: np.ndarray) -> np.ndarray:
    """Distance from each pixel centre to the mask boundary (pixels)."""
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(~mask)
    return np.where(mask, inside, outside) - 0.5


def noise_field_for(mask: np.ndarray, rho_max: float, band: float) -> np.ndarray:
    d = boundary_distance(mask)
    field_ = rho_max * np.exp(-d ** 2 / (2 * (band / 2) ** 2))
    return np.where(d <= band, field_, 0.0)


def sample_noisy_label(clean: np.ndarray, noise: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Flip each label pixel independently with probability ``noise``."""
    flip = rng.random(clean.shape) < noise
    return np.where(flip, 1.0 - clean, clean)


def _texture(rng, size, sigma):
    t = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return t / (t.std() + 1e-12)


def _offset(cfg: BenchConfig, rng, ood: bool) -> tuple[float, float]:
    if ood and cfg.ood_min_offset is not None:
        while True:
            r = cfg.ood_max_offset * np.sqrt(rng.random())
            if r >= cfg.ood_min_offset:
                th = rng.uniform(0, 2 * np.pi)
                return float(r * np.sin(th)), float(r * np.cos(th))
    while True:
        o = rng.normal(0.0, cfg.train_offset_std, size=2)
        if cfg.ood_min_offset is None or np.hypot(*o) < cfg.ood_min_offset:
            return float(o[0]), float(o[1])


def generate_sample(cfg: BenchConfig, index: int) -> SyntheticSample:
    """Deterministic sample for a global ``index`` (splits are consecutive index ranges)."""
    split, _ = cfg.split_of(index)
    ood = split == "test_ood"
    stream = RngStream(cfg.seed, 17)
    size = cfg.image_size
    for attempt in range(MAX_RETRIES + 1):
        rng = stream.generator(index, attempt)
        if ood and cfg.ood_shape is not None:
            shape = cfg.ood_shape
        else:
            pool = [s for s in SHAPES if s != cfg.ood_shape] if not ood else list(SHAPES)
            shape = pool[rng.integers(len(pool))]
        offset = _offset(cfg, rng, ood)
        radius = rng.uniform(*cfg.radius_range)
        angle = rng.uniform(0, 2 * np.pi)
        center = (size / 2 + offset[0], size / 2 + offset[1])
        mask = _shape_mask(shape, size, center, radius, angle)
        if 0 < mask.sum() < mask.size:
            break
    else:
        raise RuntimeError(f"sample {index}: degenerate mask after {MAX_RETRIES} retries")

    m = mask.astype(np.float64)
    bg = _texture(rng, size, 1.0)
    fg = _texture(rng, size, 1.2)
    a = cfg.texture_amplitude
    image = np.clip(0.4 + a * bg + m * (cfg.contrast + a * (fg - bg)), 0.0, 1.0)
    noise = noise_field_for(mask, cfg.rho_max, cfg.band)
    noisy = sample_noisy_label(m, noise, stream.generator(index, 1000 + attempt))
    return SyntheticSample(
        image=TensorMap(image), clean_mask=TensorMap(m), noisy_label=TensorMap(noisy),
        noise_field=TensorMap(noise), shape_class=shape, center_offset=offset, ood=ood,
        index=index, split=split,
    )


def is_ood(cfg: BenchConfig, shape_class: str, center_offset) -> bool:
    shape_hit = cfg.ood_shape is not None and shape_class == cfg.ood_shape
    offset_hit = cfg.ood_min_offset is not None and np.hypot(*center_offset) >= cfg.ood_min_offset
    if cfg.ood_shape is not None and cfg.ood_min_offset is not None:
        return shape_hit and offset_hit
    return shape_hit or offset_hit


# ---------------------------------------------------------------------------
# on-disk datasets

_FILE_KEYS = ("image", "clean_mask", "noisy_label", "noise_field")


def generate_dataset(cfg: BenchConfig, out_dir) -> dict[str, dict]:
    """Write every split as DMAP files plus ``manifest.json``; returns the manifests."""
    out = Path(out_dir)
    manifests = {}
    for split in SPLITS:
        sdir = out / split
        try:
            sdir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create {sdir}: {exc}") from exc
        man = {"split": split, "index": [], "files": [], "shape_class": [], "center_offset": [], "ood": []}
        for index in cfg.split_range(split):
            s = generate_sample(cfg, index)
            files = {}
            for key in _FILE_KEYS:
                fname = f"{index:05d}_{key}.dmap"
                write_dmap(sdir / fname, getattr(s, key))
                files[key] = fname
            man["index"].append(index)
            man["files"].append(files)
            man["shape_class"].append(s.shape_class)
            man["center_offset"].append(list(s.center_offset))
            man["ood"].append(s.ood)
        (sdir / "manifest.json").write_text(json.dumps(man, indent=1))
        n_files = len(list(sdir.glob("*.dmap")))
        if n_files != len(_FILE_KEYS) * len(man["index"]):
            raise FormatError(f"{sdir}: {n_files} DMAP files for {len(man['index'])} manifest entries")
        manifests[split] = man
    (out / "bench_config.json").write_text(json.dumps(asdict(cfg), indent=1))
    return manifests


@dataclass
class SplitData:
    """A split held in memory as batched arrays of shape (N, 1, H, W)."""

    name: str
    images: np.ndarray
    clean: np.ndarray
    labels: np.ndarray
    noise: np.ndarray
    shape_class: list[str] = field(default_factory=list)
    center_offset: list = field(default_factory=list)
    ood: list[bool] = field(default_factory=list)
    files: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.images)


def _stack(samples: list[SyntheticSample], name: str) -> SplitData:
    return SplitData(
        name=name,
        images=np.stack([s.image.data for s in samples]),
        clean=np.stack([s.clean_mask.data for s in samples]),
        labels=np.stack([s.noisy_label.data for s in samples]),
        noise=np.stack([s.noise_field.data for s in samples]),
        shape_class=[s.shape_class for s in samples],
        center_offset=[s.center_offset for s in samples],
        ood=[s.ood for s in samples],
        files=[f"{s.index:05d}" for s in samples],
    )


def make_split(cfg: BenchConfig, split: str) -> SplitData:
    """Generate a split in memory without touching disk."""
    return _stack([generate_sample(cfg, i) for i in cfg.split_range(split)], split)


def load_split(root, split: str) -> SplitData:
    sdir = Path(root) / split
    man_path = sdir / "manifest.json"
    if not man_path.exists():
        raise FormatError(f"missing manifest {man_path}")
    man = json.loads(man_path.read_text())
    samples = []
    for i, files in enumerate(man["files"]):
        maps = {k: read_dmap(sdir / files[k]) for k in _FILE_KEYS}
        samples.append(SyntheticSample(**maps, shape_class=man["shape_class"][i],
                                       center_offset=tuple(man["center_offset"][i]),
                                       ood=man["ood"][i], index=man["index"][i], split=split))
    return _stack(samples, split)


def load_bench_config(root) -> BenchConfig:
    return BenchConfig.from_dict(json.loads((Path(root) / "bench_config.json").read_text()))
