import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from duq.baselines import (METHODS, BaselineConfig, BaselineState, SampledPredictions, cvae_kl,
                           cvae_loss, ensemble_decompose, evaluate_baseline, gan_losses,
                           load_baseline, mc_dropout_predict, method_name, train_baseline)
from duq.bench import BenchConfig, make_split
from duq.errors import ConfigError, FormatError, UsageError
from duq.nn import Dropout
from duq.trainer import TrainConfig, TrainState

from oracles import binary_entropy_bits, gaussian_kl

TINY = dict(width=4, latent_dim=3, passes=3, members=2, epochs=1, batch_size=4)


@pytest.fixture(scope="module")
def small_data():
    bc = BenchConfig(n_train=8, n_val=4, n_test=4, n_ood=4, seed=5)
    return make_split(bc, "train"), make_split(bc, "val")


# ---------------------------------------------------------------------------
# MC dropout


def test_dropout_rate_zero_passes_identical():
    state = BaselineState(BaselineConfig(method="mc_dropout", width=4, latent_dim=3))
    x = np.random.default_rng(0).random((1, 1, 32, 32))
    s = mc_dropout_predict(state, x, passes=4, rate=0.0, rng=np.random.default_rng(1))
    assert np.array_equal(s.samples[0], s.samples[3])


def test_dropout_passes_differ():
    state = BaselineState(BaselineConfig(method="mc_dropout", width=4, latent_dim=3))
    x = np.random.default_rng(0).random((1, 1, 32, 32))
    s = mc_dropout_predict(state, x, passes=3, rate=0.3, rng=np.random.default_rng(1))
    assert np.abs(s.samples[0] - s.samples[1]).max() > 0


def test_dropout_deterministic_given_rng():
    state = BaselineState(BaselineConfig(method="mc_dropout", width=4, latent_dim=3))
    x = np.random.default_rng(0).random((1, 1, 32, 32))
    a = mc_dropout_predict(state, x, passes=3, rng=np.random.default_rng(7))
    b = mc_dropout_predict(state, x, passes=3, rng=np.random.default_rng(7))
    assert np.array_equal(a.samples, b.samples)


def test_dropout_keep_fraction():
    rng = np.random.default_rng(3)
    _, keep = Dropout(0.3).forward(np.ones((10_000, 1)), rng=rng)
    frac = float((keep > 0).mean())
    assert abs(frac - 0.7) < 0.01
    # kept units are rescaled so the expectation is unchanged
    assert np.allclose(keep[keep > 0], 1 / 0.7)


def test_dropout_rejects_zero_passes():
    state = BaselineState(BaselineConfig(method="mc_dropout", width=4, latent_dim=3))
    with pytest.raises(UsageError):
        mc_dropout_predict(state, np.zeros((1, 1, 32, 32)), passes=0)


# ---------------------------------------------------------------------------
# decomposition


def test_decompose_two_opposite_samples():
    pred, ale, epi = ensemble_decompose(np.array([[[0.0]], [[1.0]]]))
    assert pred[0, 0] == pytest.approx(1.0)
    assert ale[0, 0] == pytest.approx(0.0, abs=1e-9)
    assert epi[0, 0] == pytest.approx(1.0)


def test_decompose_identical_samples():
    p = np.random.default_rng(0).random((4, 4))
    _, _, epi = ensemble_decompose(np.stack([p] * 5))
    assert np.array_equal(epi, np.zeros_like(p))


def test_decompose_matches_oracle():
    s = np.random.default_rng(2).random((3, 2, 2))
    pred, ale, _ = ensemble_decompose(s)
    for i in range(2):
        for j in range(2):
            col = [float(v) for v in s[:, i, j]]
            assert pred[i, j] == pytest.approx(binary_entropy_bits(sum(col) / 3), abs=1e-12)
            assert ale[i, j] == pytest.approx(sum(binary_entropy_bits(v) for v in col) / 3, abs=1e-12)


@given(arrays(np.float64, st.tuples(st.integers(2, 6), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(0, 1)))
def test_decompose_jensen(samples):
    _, _, epi = ensemble_decompose(samples)
    assert (epi >= -1e-9).all()


def test_decompose_needs_two_samples():
    with pytest.raises(UsageError):
        ensemble_decompose(np.zeros((0, 2, 2)))
    with pytest.raises(UsageError):
        ensemble_decompose(np.zeros((1, 2, 2)))


def test_sampled_predictions_source_tag():
    assert len(SampledPredictions(np.zeros((3, 2, 2)), "gan")) == 3
    with pytest.raises(UsageError):
        SampledPredictions(np.zeros((3, 2, 2)), "bayes")


# ---------------------------------------------------------------------------
# GAN and CVAE losses


def test_gan_half_discriminator_gives_ln2():
    pred = np.full((1, 1, 4, 4), 0.3)
    y = np.ones((1, 1, 4, 4))
    half = lambda m: np.full_like(m, 0.5)  # noqa: E731
    l0, _ = gan_losses(pred, y, half, lam=0.0)
    l1, l_dis = gan_losses(pred, y, half, lam=1.0)
    assert l1 - l0 == pytest.approx(math.log(2), rel=1e-9)
    assert l_dis == pytest.approx(2 * math.log(2), rel=1e-9)


def test_gan_lambda_zero_is_reconstruction():
    rng = np.random.default_rng(0)
    pred, y = rng.uniform(0.05, 0.95, (1, 1, 4, 4)), (rng.random((1, 1, 4, 4)) > 0.5) * 1.0
    l_gen, _ = gan_losses(pred, y, lambda m: rng.random(m.shape), lam=0.0)
    rec = -np.mean(y * np.log(pred) + (1 - y) * np.log(1 - pred))
    assert l_gen == pytest.approx(rec, rel=1e-12)


def test_gan_perfect_discriminator_at_floor():
    pred = np.full((1, 1, 4, 4), 0.2)
    y = np.ones((1, 1, 4, 4))
    _, l_dis = gan_losses(pred, y, lambda m: (m == 1.0) * 1.0, lam=0.1)
    assert l_dis < 1e-6


def test_gan_gradients_with_discriminator():
    state = BaselineState(BaselineConfig(method="gan", width=4, latent_dim=3))
    rng = np.random.default_rng(0)
    x, pred, y = rng.random((2, 1, 32, 32)), rng.uniform(0.1, 0.9, (2, 1, 32, 32)), rng.random((2, 1, 32, 32))
    l_gen, l_dis, g_pred, d_grads = gan_losses(pred, y, state.disc, 0.1, x=x, with_grads=True)
    assert math.isfinite(l_gen) and math.isfinite(l_dis)
    assert g_pred.shape == pred.shape
    assert set(d_grads) == set(state.aux.names())
    with pytest.raises(UsageError):
        gan_losses(pred, y, state.disc, 0.1)


def test_kl_identical_moments_zero():
    mu, lv = np.array([[0.3, -1.0]]), np.array([[0.2, -0.5]])
    assert cvae_kl(mu, lv, mu, lv)[0] == pytest.approx(0.0, abs=1e-15)


def test_kl_unit_shift():
    assert cvae_kl([[0.0]], [[0.0]], [[1.0]], [[0.0]])[0] == pytest.approx(0.5)
    assert cvae_loss(1.25, [[0.0]], [[0.0]], [[1.0]], [[0.0]]) == pytest.approx(1.75)


def test_kl_matches_oracle():
    args = (0.4, math.log(0.5), -0.3, math.log(2.0))
    got = cvae_kl([[args[0]]], [[args[1]]], [[args[2]]], [[args[3]]])[0]
    assert got == pytest.approx(gaussian_kl(*args), rel=1e-12)


def test_kl_monte_carlo():
    mp, lp, mq, lq = 0.4, math.log(0.5), -0.3, math.log(2.0)
    z = mp + math.exp(lp / 2) * np.random.default_rng(11).standard_normal(100_000)
    log_post = -0.5 * ((z - mp) ** 2 / math.exp(lp) + lp)
    log_prior = -0.5 * ((z - mq) ** 2 / math.exp(lq) + lq)
    mc = float((log_post - log_prior).mean())
    assert mc == pytest.approx(cvae_kl([[mp]], [[lp]], [[mq]], [[lq]])[0], rel=0.01)


def test_kl_dimension_mismatch():
    with pytest.raises(UsageError):
        cvae_kl(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 3)), np.zeros((1, 3)))


# ---------------------------------------------------------------------------
# configs, training and checkpoints


def test_method_names():
    assert method_name("mc-dropout") == "mc_dropout"
    with pytest.raises(UsageError):
        method_name("laplace")
    with pytest.raises(ConfigError):
        BaselineConfig(dropout_rate=1.0)
    with pytest.raises(ConfigError):
        BaselineConfig.from_dict({"method": "gan", "depth": 3})


def test_cvae_posterior_takes_label_channel():
    state = BaselineState(BaselineConfig(method="cvae", width=4, latent_dim=3))
    first = [n for n in state.aux.names() if n.startswith("post.")][0]
    assert state.aux[first].shape[1] == 2


@pytest.mark.parametrize("method", METHODS)
def test_train_and_reload(method, small_data, tmp_path):
    train, val = small_data
    cfg = BaselineConfig(method=method, **TINY)
    state, log = train_baseline(cfg, train, val, out_dir=tmp_path)
    assert len(log.rows) == 1 and math.isfinite(log.rows[0]["L_d"])
    again = load_baseline(tmp_path / "model.duqc")
    a = evaluate_baseline(state, val).report
    b = evaluate_baseline(again, val).report
    assert a.as_dict() == b.as_dict()
    assert a.method == method
    assert a.as_dict()["epistemic_mean"] >= 0


def test_baseline_reload_rejects_main_model(tmp_path):
    state = TrainState(TrainConfig(width=4, latent_dim=3, ensemble=2))
    path = tmp_path / "m.duqc"
    path.write_bytes(state.to_bytes())
    with pytest.raises(FormatError):
        load_baseline(path)
