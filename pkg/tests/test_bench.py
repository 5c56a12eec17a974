import json

import numpy as np
import pytest

from duq.bench import (BenchConfig, generate_dataset, generate_sample, is_ood, load_split,
                       make_split, noise_field_for, sample_noisy_label)
from duq.errors import ConfigError

SMALL = dict(n_train=12, n_val=4, n_test=4, n_ood=6)


def test_zero_noise_keeps_clean_labels():
    cfg = BenchConfig(rho_max=0.0, **SMALL)
    for i in range(6):
        s = generate_sample(cfg, i)
        np.testing.assert_array_equal(s.noisy_label.data, s.clean_mask.data)
        assert not np.any(s.noise_field.data)


def test_same_seed_and_index_is_bit_identical():
    cfg = BenchConfig(seed=5, **SMALL)
    a, b = generate_sample(cfg, 3), generate_sample(cfg, 3)
    for key in ("image", "clean_mask", "noisy_label", "noise_field"):
        assert getattr(a, key).data.tobytes() == getattr(b, key).data.tobytes()


def test_noise_field_bounded_and_banded():
    cfg = BenchConfig(**SMALL)
    s = generate_sample(cfg, 0)
    nf = s.noise_field.data
    assert nf.min() >= 0 and nf.max() <= cfg.rho_max
    assert nf.max() > 0
    # far from the boundary the labels are clean
    assert np.all(s.noisy_label.data[nf == 0] == s.clean_mask.data[nf == 0])


def test_empirical_flip_rate_matches_field():
    cfg = BenchConfig(**SMALL)
    s = generate_sample(cfg, 1)
    clean, noise = s.clean_mask.data[0], s.noise_field.data[0]
    rng = np.random.default_rng(0)
    flips = np.zeros_like(clean)
    n = 10_000
    for _ in range(n):
        flips += sample_noisy_label(clean, noise, rng) != clean
    band = noise > 0.1
    assert np.max(np.abs(flips[band] / n - noise[band])) < 0.01 + 4 * np.sqrt(0.25 / n)
    assert np.abs(flips[band] / n - noise[band]).mean() < 0.01


def test_noise_peaks_at_boundary():
    mask = np.zeros((16, 16), bool)
    mask[4:12, 4:12] = True
    nf = noise_field_for(mask, 0.4, 3.0)
    assert nf[4, 8] > nf[8, 8]
    assert nf[0, 0] == 0.0


def test_ood_split_rule():
    cfg = BenchConfig(**SMALL)
    train = make_split(cfg, "train")
    ood = make_split(cfg, "test_ood")
    assert "crescent" not in train.shape_class
    assert set(ood.shape_class) == {"crescent"}
    assert all(np.hypot(*o) >= cfg.ood_min_offset for o in ood.center_offset)
    assert all(ood.ood) and not any(train.ood)
    assert all(is_ood(cfg, s, o) for s, o in zip(ood.shape_class, ood.center_offset))
    assert not any(is_ood(cfg, s, o) for s, o in zip(train.shape_class, train.center_offset))


def test_shape_only_rule():
    cfg = BenchConfig(ood_min_offset=None, **SMALL)
    assert is_ood(cfg, "crescent", (0.0, 0.0))
    assert not is_ood(cfg, "disk", (9.0, 0.0))


def test_config_validation():
    with pytest.raises(ConfigError):
        BenchConfig(rho_max=0.7)
    with pytest.raises(ConfigError):
        BenchConfig(ood_shape="hexagon")
    with pytest.raises(ConfigError):
        BenchConfig(n_val=0)


def test_dataset_on_disk(tmp_path):
    cfg = BenchConfig(seed=2, **SMALL)
    mans = generate_dataset(cfg, tmp_path / "a")
    for split, n in cfg.split_sizes().items():
        assert len(mans[split]["files"]) == n
        assert len(list((tmp_path / "a" / split).glob("*.dmap"))) == 4 * n
        man = json.loads((tmp_path / "a" / split / "manifest.json").read_text())
        assert len(man["index"]) == n
    generate_dataset(cfg, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*.dmap")):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    loaded = load_split(tmp_path / "a", "val")
    mem = make_split(cfg, "val")
    np.testing.assert_array_equal(loaded.labels, mem.labels)
    np.testing.assert_allclose(loaded.images, mem.images, atol=1e-7)
