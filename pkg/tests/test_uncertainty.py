import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from duq.errors import UsageError
from duq.nn import TensorMap
from duq.uncertainty import (HeadsConfig, UncertaintyHeads, aleatoric_consistency_loss,
                             attenuated_loss, bce_map, bice_loss, binary_entropy, ce_loss, decompose,
                             mean_error, minmax_norm, minmax_norm_backward, optimal_prediction,
                             predictive_consistency_loss, predictive_targets)

unit = st.floats(0.0, 1.0)


def test_binary_entropy_values():
    assert binary_entropy(np.array(0.5)) == pytest.approx(1.0)
    assert binary_entropy(np.array([0.0, 1.0])).tolist() == [0.0, 0.0]
    assert binary_entropy(np.array(0.25)) == pytest.approx(0.8112781244591328)
    assert isinstance(binary_entropy(TensorMap(np.full((2, 2), 0.5))), TensorMap)


def test_binary_entropy_domain():
    with pytest.raises(UsageError):
        binary_entropy(np.array([1.1]))


def test_attenuated_unit_variance_cases(rng):
    p = rng.uniform(0.05, 0.95, (1, 1, 4, 4))
    y = (rng.random(p.shape) > 0.5).astype(float)
    base = bce_map(p, y).mean()
    assert attenuated_loss(p, y, s=np.zeros_like(p), mode="regression") == pytest.approx(base / 2)
    assert attenuated_loss(p, y, sigma_sq=np.zeros_like(p), mode="classification") == pytest.approx(base)


@pytest.mark.parametrize("mode", ["regression", "classification"])
def test_attenuated_gradient_in_s(rng, mode):
    p = rng.uniform(0.05, 0.95, (1, 1, 3, 3))
    y = (rng.random(p.shape) > 0.5).astype(float)
    s = rng.normal(0, 0.5, p.shape)
    _, g_p, g_s = attenuated_loss(p, y, s=s, mode=mode, with_grads=True)
    h = 1e-6
    for arr, g in ((s, g_s), (p, g_p)):
        fd = np.zeros_like(arr)
        for i in range(arr.size):
            d = np.zeros(arr.size)
            d[i] = h
            d = d.reshape(arr.shape)
            if arr is s:
                fd.flat[i] = (attenuated_loss(p, y, s=s + d, mode=mode)
                              - attenuated_loss(p, y, s=s - d, mode=mode)) / (2 * h)
            else:
                fd.flat[i] = (attenuated_loss(p + d, y, s=s, mode=mode)
                              - attenuated_loss(p - d, y, s=s, mode=mode)) / (2 * h)
        assert np.max(np.abs(fd - g) / np.maximum(np.abs(fd), 1e-8)) < 1e-5


def test_attenuated_argument_errors(rng):
    p = np.full((1, 1, 2, 2), 0.5)
    with pytest.raises(UsageError):
        attenuated_loss(p, p)
    with pytest.raises(UsageError):
        attenuated_loss(p, p, s=np.zeros((3, 3)))
    with pytest.raises(UsageError):
        attenuated_loss(p, p, s=np.zeros_like(p), mode="ranking")


def test_optimal_prediction_single_member(rng):
    p = rng.random((1, 1, 4, 4))
    np.testing.assert_array_equal(optimal_prediction(p[None], p.round()), p)


def test_optimal_prediction_oracle_member(rng):
    y = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
    f = optimal_prediction(np.stack([y, 1 - y]), y)
    np.testing.assert_array_equal(f, y)
    assert bce_map(f, y).sum() == pytest.approx(0.0, abs=1e-9)


def test_optimal_prediction_brute_force(rng):
    preds = rng.random((5, 1, 1, 6, 6))
    y = (rng.random((1, 1, 6, 6)) > 0.5).astype(float)
    f = optimal_prediction(preds, y)
    for i in range(6):
        for j in range(6):
            losses = [bce_map(preds[m, 0, 0, i, j], y[0, 0, i, j]) for m in range(5)]
            assert f[0, 0, i, j] == preds[int(np.argmin(losses)), 0, 0, i, j]
    whole = [bce_map(preds[m], y).sum() for m in range(5)]
    assert bce_map(f, y).sum() <= min(whole)


def test_optimal_prediction_empty():
    with pytest.raises(UsageError):
        optimal_prediction(np.zeros((0, 1, 1, 2, 2)), np.zeros((1, 1, 2, 2)))


def test_minmax_norm_examples():
    np.testing.assert_allclose(minmax_norm(np.array([[[1.0, 2.0, 3.0]]])), [[[0, 0.5, 1]]])
    assert not np.any(minmax_norm(np.full((1, 3, 3), 4.0)))


@given(arrays(np.float64, (2, 1, 3, 3), elements=st.floats(-5, 5)))
def test_minmax_norm_range(v):
    u = minmax_norm(v)
    assert u.min() >= 0 and u.max() <= 1


def test_minmax_backward_matches_fd(rng):
    v = rng.standard_normal((2, 1, 3, 3))
    g = rng.standard_normal(v.shape)
    an = minmax_norm_backward(v, g)
    h = 1e-6
    for i in range(v.size):
        d = np.zeros(v.size)
        d[i] = h
        d = d.reshape(v.shape)
        fd = (np.sum(g * minmax_norm(v + d)) - np.sum(g * minmax_norm(v - d))) / (2 * h)
        assert fd == pytest.approx(an.flat[i], rel=1e-6, abs=1e-8)


def test_bice_half():
    assert bice_loss(np.array([0.5]), np.array([0.5]))[0] == pytest.approx(2 * math.log(2))


@pytest.mark.parametrize("v", [0.0, 1.0])
def test_bice_degenerate(v):
    assert bice_loss(np.array([v]), np.array([v]))[0] == pytest.approx(0.0, abs=1e-6)


def test_bice_training_fixed_point_by_scan():
    # the descent direction vanishes where u matches the target
    grid = np.arange(1, 1000) / 1000
    slopes = [abs(bice_loss(np.array([u]), np.array([0.3]))[1][0]) for u in grid]
    assert grid[int(np.argmin(slopes))] == pytest.approx(0.3, abs=1e-3)


def test_bice_value_minimiser_by_scan():
    # the value itself is minimised where its full derivative in u vanishes (bisection root)
    grid = np.arange(1, 1000) / 1000
    vals = [bice_loss(np.array([u]), np.array([0.3]))[0] for u in grid]
    t = 0.3

    def dval(u):
        return -t / u + (1 - t) / (1 - u) - math.log(t) + math.log(1 - t)

    lo, hi = 1e-6, 0.5
    for _ in range(100):
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if dval(mid) < 0 else (lo, mid)
    assert grid[int(np.argmin(vals))] == pytest.approx(lo, abs=1e-3)


def test_bice_domain():
    with pytest.raises(UsageError):
        bice_loss(np.array([1.5]), np.array([0.5]))


@given(arrays(np.float64, 4, elements=st.floats(0.01, 0.99)), arrays(np.float64, 4, elements=unit))
def test_bice_gradient_is_forward_term_gradient(u, t):
    _, g = bice_loss(u, t)
    h = 1e-6
    for i in range(4):
        d = np.zeros(4)
        d[i] = h
        fd = (ce_loss(u + d, t)[0] - ce_loss(u - d, t)[0]) / (2 * h)
        assert fd == pytest.approx(g[i], rel=1e-4, abs=1e-6)


def test_bice_self_term_direct():
    t = np.array([0.2, 0.7, 0.4])
    direct = 2 * np.mean(-(t * np.log(t) + (1 - t) * np.log(1 - t)))
    assert bice_loss(t, t)[0] == pytest.approx(direct)


def test_ce_loss_gradient_sign():
    _, g = ce_loss(np.array([0.2]), np.array([1.0]))
    assert g[0] < 0


def test_mean_error_examples(rng):
    y = (rng.random((1, 1, 3, 3)) > 0.5).astype(float)
    assert not np.any(mean_error(np.stack([y, y]), y))
    err = mean_error(np.stack([np.ones((1, 1, 1, 1)), np.zeros((1, 1, 1, 1))]), np.ones((1, 1, 1, 1)))
    assert err.item() == pytest.approx(0.25)
    preds = rng.random((4, 1, 1, 3, 3))
    two_pass = np.zeros((1, 1, 3, 3))
    for p in preds:
        two_pass += p
    two_pass = (two_pass / 4 - y) ** 2
    np.testing.assert_allclose(mean_error(preds, y), two_pass, rtol=1e-12)


def test_predictive_targets_perfect_ensemble(rng):
    y = (rng.random((1, 1, 4, 4)) > 0.5).astype(float)
    t_ent, t_err = predictive_targets(np.stack([y, y, y]), y)
    assert not np.any(t_ent) and not np.any(t_err)


def test_predictive_targets_hand_case():
    y = np.array([[[[1.0, 0.0], [1.0, 0.0]]]])
    a, b = y.copy(), y.copy()
    a[0, 0, 0, 0], b[0, 0, 0, 0] = 1.0, 0.0
    t_ent, t_err = predictive_targets(np.stack([a, b]), y)
    expected = [[[[1.0, 0.0], [0.0, 0.0]]]]
    assert t_ent.tolist() == expected and t_err.tolist() == expected


@pytest.fixture(scope="module")
def heads():
    return UncertaintyHeads(HeadsConfig(aleatoric_width=4, predictive_width=4))


def test_aleatoric_loss_at_floor_for_binary_target():
    h = UncertaintyHeads(HeadsConfig(aleatoric_width=4, predictive_width=4))
    for name in h.alpha.names():
        h.alpha[name] = np.zeros_like(h.alpha[name])
    x = np.random.default_rng(0).random((1, 1, 16, 16))
    f_star = (x > 0.5).astype(float)
    loss, grads = aleatoric_consistency_loss(h, x, f_star)
    assert loss == pytest.approx(0.0, abs=1e-6)
    assert set(grads) == set(h.alpha.names(learnable_only=True))


def test_consistency_losses_touch_only_their_head(heads, rng):
    x = rng.random((2, 1, 16, 16))
    preds = rng.random((3, 2, 1, 16, 16))
    y = (rng.random((2, 1, 16, 16)) > 0.5).astype(float)
    _, ga = aleatoric_consistency_loss(heads, x, preds[0])
    _, gb, u = predictive_consistency_loss(heads, x, preds, y)
    assert set(ga) <= set(heads.alpha.names()) and not set(ga) & set(heads.beta.names())
    assert set(gb) <= set(heads.beta.names()) and not set(gb) & set(heads.alpha.names())
    assert u.shape == x.shape and u.min() >= 0 and u.max() <= 1


def test_predictive_loss_needs_predictions(heads):
    with pytest.raises(UsageError):
        predictive_consistency_loss(heads, np.zeros((1, 1, 16, 16)), np.zeros((0, 1, 1, 16, 16)),
                                    np.zeros((1, 1, 16, 16)))


def test_decompose_identical_heads_gives_zero_epistemic(rng):
    h = UncertaintyHeads(HeadsConfig(aleatoric_width=4, predictive_width=4))
    x = rng.random((1, 1, 16, 16))
    s = rng.random((1, 1, 16, 16))
    fixed = np.log(rng.uniform(0.5, 2.0, (1, 1, 16, 16)))
    h.aleatoric_s = lambda _x, train=False: (fixed, None)
    h.predictive_s = lambda _x, _p, train=False: (fixed, None)
    b = decompose(h, x, s)
    assert not np.any(b.epistemic_raw)
    assert set(b.maps()) == {"aleatoric", "epistemic", "predictive"}


def test_epistemic_is_clamped(heads, rng):
    x = rng.random((1, 1, 16, 16))
    b = decompose(heads, x, rng.random((1, 1, 16, 16)))
    assert np.all(b.epistemic >= 0)
    np.testing.assert_allclose(b.epistemic_raw, b.predictive - b.aleatoric)
