from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.stats import norm

from pdssvi.data import IvsGrid
from pdssvi.ssvi import (HESTON, MODIFIED_POWER_LAW, POWER_LAW, NoRootError, PhiParam, PssviParams, SsviSurface,
                         atm_skew, bs_call_price, bs_delta, calibrate_pssvi_daily, calibrate_ssvi_daily,
                         check_static_arbitrage, delta_to_moneyness, implied_vol, implied_vol_from_price,
                         moneyness_from_delta_fixed_vol, phi_eval, power_law_thresholds, price_grid_oracle,
                         pssvi_implied_vol, total_variance)
from pdssvi.ssvi.arbitrage import mpl_peak_value, mpl_theta_star

T_GRID = np.array([1, 2, 3, 6, 9, 12]) / 12.0
M_GRID = np.array([0.8, 0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.15, 1.2])


def textbook_call(m, T, s):
    d1 = (-math.log(m) + 0.5 * s * s * T) / (s * math.sqrt(T))
    return norm.cdf(d1) - m * norm.cdf(d1 - s * math.sqrt(T))


def test_bs_price_and_delta_against_textbook():
    for m, T, s in [(0.9, 0.5, 0.2), (1.3, 2.0, 0.35), (1.0, 0.01, 0.1)]:
        assert bs_call_price(m, T, s) == pytest.approx(textbook_call(m, T, s), rel=1e-12)
        d1 = (-math.log(m) + 0.5 * s * s * T) / (s * math.sqrt(T))
        assert bs_delta(m, T, s) == pytest.approx(norm.cdf(d1), rel=1e-12)
        assert bs_delta(m, T, s, is_call=False) == pytest.approx(norm.cdf(d1) - 1, rel=1e-12)
    assert bs_call_price(0.9, 1.0, 0.0) == pytest.approx(0.1)


def test_implied_vol_inverts_price():
    for m, T, s in [(0.8, 0.25, 0.3), (1.2, 1.0, 0.15)]:
        assert implied_vol_from_price(bs_call_price(m, T, s), m, T) == pytest.approx(s, rel=1e-9)
    with pytest.raises(ValueError):
        implied_vol_from_price(1.5, 1.0, 1.0)


def test_delta_inversion_flat_and_smile():
    for delta in (0.25, 0.5, 0.75, -0.25):
        m = delta_to_moneyness(delta, 0.5, 0.2)
        assert m == pytest.approx(moneyness_from_delta_fixed_vol(delta, 0.5, 0.2), rel=1e-8)
    s = PssviParams(0.04, 1.0, -0.6, 1.0)
    vol = lambda k, t: pssvi_implied_vol(s.a, s.p, s.rho, s.eta, k, t)  # noqa: E731
    m = delta_to_moneyness(np.array([0.2, 0.5, 0.8]), 0.25, vol)
    np.testing.assert_allclose(bs_delta(m, 0.25, vol(np.log(m), 0.25)), [0.2, 0.5, 0.8], atol=1e-9)
    with pytest.raises(ValueError):
        delta_to_moneyness(1.2, 0.5, 0.2)
    with pytest.raises(NoRootError):
        delta_to_moneyness(0.999999, 1.0, 2.0)


def test_phi_variants():
    assert phi_eval(PhiParam.heston(2.0), 0.5) == pytest.approx((1 - (1 - math.exp(-1.0)) / 1.0) / 1.0)
    # small lambda*theta branch agrees with the closed form just above the switch
    lam, th = 1.0, 2e-4
    exact = (1 - (1 - math.exp(-lam * th)) / (lam * th)) / (lam * th)
    assert phi_eval(PhiParam.heston(lam), th) == pytest.approx(exact, rel=1e-7)
    assert phi_eval(PhiParam.power_law(0.8, 0.3), 0.2) == pytest.approx(0.8 / 0.2 ** 0.3)
    assert phi_eval(PhiParam.modified_power_law(0.8, 0.3), 0.2) == pytest.approx(0.8 / (0.2 ** 0.3 * 1.2 ** 0.7))
    with pytest.raises(ValueError):
        PhiParam.power_law(0.8, 1.2)


def test_pssvi_matches_generic_ssvi():
    s = PssviParams(0.05, 0.9, -0.5, 1.1)
    generic = SsviSurface(tuple(T_GRID), tuple(s.theta_at(T_GRID)), -0.5, PhiParam.modified_power_law(1.1, 0.5))
    k = np.linspace(-1, 1, 11)
    for T in T_GRID:
        np.testing.assert_allclose(total_variance(s, k, T), total_variance(generic, k, T), rtol=1e-13)


def test_zero_level_surface_is_flat_zero():
    assert total_variance(PssviParams(0.0, 1.0, 0.3, 1.0), 0.4, 1.0) == 0.0


def test_ssvi_theta_interpolation():
    s = SsviSurface((0.5, 1.0), (0.02, 0.05), 0.0, PhiParam.heston(1.0))
    assert s.theta_at(0.25) == pytest.approx(0.01)
    assert s.theta_at(0.75) == pytest.approx(0.035)
    assert s.theta_at(2.0) == pytest.approx(0.05)


def test_atm_skew_formula_by_finite_difference():
    s = SsviSurface(tuple(T_GRID), tuple(0.04 * T_GRID), -0.4, PhiParam.power_law(0.7, 0.4))
    h = 1e-5
    for T in T_GRID:
        fd = (implied_vol(s, h, T) - implied_vol(s, -h, T)) / (2 * h)
        assert atm_skew(s, T) == pytest.approx(fd, rel=1e-6)


def test_power_law_thresholds_solve_their_equations():
    t1, t2 = power_law_thresholds(1.0, 0.3, -0.5)
    assert 1.0 * t1 ** 0.7 * 1.5 == pytest.approx(4.0, rel=1e-8)
    assert 1.0 * t2 ** 0.4 * 1.5 == pytest.approx(4.0, rel=1e-8)
    t1, t2 = power_law_thresholds(1.0, 0.5, 0.0)
    assert math.isnan(t2)
    ts = mpl_theta_star(2.0, 0.7, 0.2)
    assert 4.0 * ts ** (1 - 1.4) / (1 + ts) ** 0.6 * 1.2 == pytest.approx(4.0, rel=1e-8)
    peak = mpl_peak_value(1.0, 0.3)
    grid = np.linspace(1e-4, 5, 200001)
    assert peak == pytest.approx(np.max(grid * (1.0 / (grid ** 0.3 * (1 + grid) ** 0.7)) ** 2), rel=1e-6)


def test_arbitrage_checks_agree_with_price_oracle_on_examples():
    good = PssviParams(0.04, 1.0, -0.7, 1.0)
    bad = PssviParams(0.04, 1.0, 0.9, 1.9)
    assert check_static_arbitrage(good)
    assert price_grid_oracle(good, T_GRID).passed
    verdict = check_static_arbitrage(bad)
    assert not verdict and verdict.violations
    heston_bad = SsviSurface(tuple(T_GRID), tuple(0.04 * T_GRID), 0.5, PhiParam.heston(0.1))
    assert not check_static_arbitrage(heston_bad)
    calendar_bad = SsviSurface((0.5, 1.0), (0.05, 0.04), 0.0, PhiParam.heston(1.0))
    assert not check_static_arbitrage(calendar_bad)
    assert price_grid_oracle(calendar_bad, (0.5, 1.0)).max_calendar_violation > 0


def test_butterfly_violation_visible_to_oracle():
    # far outside the admissible region the call prices stop being convex in strike
    s = SsviSurface((1.0,), (0.5,), 0.95, PhiParam.power_law(6.0, 0.5))
    assert not check_static_arbitrage(s)
    assert price_grid_oracle(s, (1.0,), k_range=(-3, 3), n_strikes=600).max_convexity_violation > 1e-6


def _grid(vols):
    return IvsGrid(np.datetime64("2020-01-02"), T_GRID, "moneyness", np.tile(M_GRID, (T_GRID.size, 1)), vols)


def _pssvi_vols(s):
    k = np.log(M_GRID)
    return np.array([pssvi_implied_vol(s.a, s.p, s.rho, s.eta, k, T) for T in T_GRID])


def test_pssvi_daily_fit_recovers_parameters():
    truth = PssviParams(0.03, 1.15, -0.65, 0.95)
    est, rep = calibrate_pssvi_daily(_grid(_pssvi_vols(truth)))
    np.testing.assert_allclose([est.a, est.p, est.rho, est.eta], [truth.a, truth.p, truth.rho, truth.eta],
                               rtol=1e-6)
    assert rep.converged and rep.mean_rel_err < 1e-8
    assert est.arbitrage_margin() >= 0


def test_pssvi_fit_stays_arbitrage_free_on_noisy_quotes():
    truth = PssviParams(0.03, 1.0, -0.9, 1.4)
    noisy = _pssvi_vols(truth) * (1 + np.random.default_rng(0).normal(0, 0.02, (T_GRID.size, M_GRID.size)))
    est, _ = calibrate_pssvi_daily(_grid(noisy))
    assert est.arbitrage_margin() >= -1e-12


@pytest.mark.parametrize("variant", [HESTON, POWER_LAW, MODIFIED_POWER_LAW])
def test_ssvi_daily_fit_recovers_own_surface(variant):
    phi = {HESTON: PhiParam.heston(1.5), POWER_LAW: PhiParam.power_law(0.9, 0.4),
           MODIFIED_POWER_LAW: PhiParam.modified_power_law(0.9, 0.4)}[variant]
    truth = SsviSurface(tuple(T_GRID), tuple(0.04 * T_GRID ** 1.1), -0.6, phi)
    vols = np.array([implied_vol(truth, np.log(M_GRID), T) for T in T_GRID])
    surf, rep = calibrate_ssvi_daily(_grid(vols), variant=variant)
    assert rep.mean_rel_err < 1e-4
    assert surf.rho == pytest.approx(-0.6, abs=1e-3)
    with pytest.raises(ValueError):
        calibrate_ssvi_daily(_grid(vols), variant="cubic")
