from __future__ import annotations

import numpy as np
import pytest
from conftest import naive_features, naive_tspl_weights

from pdssvi.features import (DT, TsplKernel, causal_filter, ewma_features, exponential_lag_weights,
                             fit_tspl_to_curve, fit_tspl_to_exponential_mixture, kernel_weights,
                             kernel_weights_and_grads, trend_feature, trend_features, vol_feature, vol_features)


def test_weights_match_loop_and_normalize(rng):
    for _ in range(20):
        a, d, c = rng.uniform(0, 5), rng.uniform(1e-3, 1), int(rng.integers(1, 400))
        w = kernel_weights(TsplKernel(a, d, c))
        np.testing.assert_allclose(w, naive_tspl_weights(a, d, c, DT), rtol=1e-12)
        assert abs(w.sum() * DT - 1.0) < 1e-12


def test_alpha_zero_gives_flat_weights():
    w = kernel_weights(TsplKernel(0.0, 0.0, 9))
    np.testing.assert_allclose(w, np.full(10, 1.0 / (10 * DT)))


def test_large_alpha_does_not_overflow():
    w = kernel_weights(TsplKernel(40.0, 1e-4, 50))
    assert np.all(np.isfinite(w))
    assert w[0] * DT == pytest.approx(1.0, rel=1e-9)


@pytest.mark.parametrize("bad", [dict(alpha=-1, delta=0.1, cutoff=5), dict(alpha=1, delta=-0.1, cutoff=5),
                                 dict(alpha=1, delta=0.1, cutoff=0), dict(alpha=1, delta=0.1, cutoff=2.5)])
def test_invalid_kernel_rejected(bad):
    with pytest.raises(ValueError):
        TsplKernel(**bad)


def test_zero_delta_with_positive_alpha_is_singular():
    with pytest.raises(ValueError):
        kernel_weights(TsplKernel(1.0, 0.0, 5))


def test_weight_gradients_match_finite_differences():
    k = TsplKernel(1.7, 0.04, 60)
    _, ga, gd = kernel_weights_and_grads(k)
    h = 1e-6
    fa = (kernel_weights(k.with_params(1.7 + h, 0.04)) - kernel_weights(k.with_params(1.7 - h, 0.04))) / (2 * h)
    fd = (kernel_weights(k.with_params(1.7, 0.04 + h)) - kernel_weights(k.with_params(1.7, 0.04 - h))) / (2 * h)
    np.testing.assert_allclose(ga, fa, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(gd, fd, rtol=1e-6, atol=1e-4)


def test_vectorized_features_match_loop(rng):
    r = rng.normal(0, 0.01, 600)
    k1, k2 = TsplKernel(2.0, 0.05, 100), TsplKernel(1.2, 0.1, 250)
    idx = np.array([250, 300, 599])
    R1 = trend_features(r, k1, idx)
    S = vol_features(r, k2, idx)
    for j, t in enumerate(idx):
        r1, s = naive_features(r, 2.0, 0.05, 100, 1.2, 0.1, 250, t, DT)
        assert R1[j] == pytest.approx(r1, rel=1e-12)
        assert S[j] == pytest.approx(s, rel=1e-12)
        assert trend_feature(r, k1, t) == pytest.approx(r1, rel=1e-12)
        assert vol_feature(r, k2, t) == pytest.approx(s, rel=1e-12)


def test_lag_zero_is_included():
    r = np.zeros(20)
    r[-1] = 0.01
    k = TsplKernel(1.0, 0.1, 5)
    assert trend_feature(r, k, 19) == pytest.approx(kernel_weights(k)[0] * 0.01)


def test_insufficient_history_names_requirement():
    with pytest.raises(ValueError, match="6 returns"):
        trend_feature(np.zeros(10), TsplKernel(1.0, 0.1, 5), 3)
    with pytest.raises(IndexError):
        vol_feature(np.zeros(10), TsplKernel(1.0, 0.1, 5), 10)


def test_causal_filter_definition(rng):
    x = rng.normal(size=30)
    w = rng.normal(size=4)
    y = causal_filter(x, w)
    for t in range(30):
        assert y[t] == pytest.approx(sum(w[l] * x[t - l] for l in range(4) if t - l >= 0))


def test_ewma_constant_series_and_recursion(rng):
    np.testing.assert_allclose(ewma_features(np.full(50, 0.3), (5, 20)), 0.3)
    x = rng.normal(size=40)
    out = ewma_features(x, (9,))[:, 0]
    a = 1 - 2 / 10
    for t in (0, 5, 39):
        wts = a ** np.arange(t + 1)
        assert out[t] == pytest.approx(np.dot(wts, x[t::-1]) / wts.sum())
    np.testing.assert_allclose(ewma_features(x, (9,), squared=True)[:, 0], ewma_features(x * x, (9,))[:, 0])


def test_tspl_fit_recovers_own_curve():
    curve = kernel_weights(TsplKernel(1.3, 0.07, 300))
    a, d = fit_tspl_to_curve(curve)
    assert a == pytest.approx(1.3, rel=1e-5)
    assert d == pytest.approx(0.07, rel=1e-5)


def test_tspl_fit_to_exponential_mixture_tracks_profile():
    spans = (10, 120)
    curve = exponential_lag_weights(spans, 250) @ np.array([0.6, 0.4])
    a, d = fit_tspl_to_exponential_mixture([0.6, 0.4], spans, 250)
    fit = kernel_weights(TsplKernel(a, d, 250))
    target = curve / (curve.sum() * DT)
    assert np.corrcoef(fit, target)[0, 1] > 0.95
    with pytest.raises(ValueError):
        fit_tspl_to_exponential_mixture([0.0, 0.0], spans, 250)
