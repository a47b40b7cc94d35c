"""SSVI surfaces: evaluation, static-arbitrage checks, Black-Scholes helpers and daily calibration."""

from .arbitrage import ArbitrageVerdict, check_static_arbitrage, power_law_thresholds, price_grid_oracle
from .blackscholes import (NoRootError, bs_call_price, bs_delta, bs_vega, delta_to_moneyness,
                           implied_vol_from_price, moneyness_from_delta_fixed_vol)
from .calibration import CalibrationError, FitReport, calibrate_pssvi_daily, calibrate_ssvi_daily
from .surface import (HESTON, MODIFIED_POWER_LAW, POWER_LAW, PhiParam, PssviParams, SsviSurface, atm_skew,
                      implied_vol, phi_eval, pssvi_implied_vol, pssvi_total_variance, total_variance)

__all__ = [
    "ArbitrageVerdict", "CalibrationError", "FitReport", "HESTON", "MODIFIED_POWER_LAW", "NoRootError",
    "POWER_LAW", "PhiParam", "PssviParams", "SsviSurface", "atm_skew", "bs_call_price", "bs_delta", "bs_vega",
    "calibrate_pssvi_daily", "calibrate_ssvi_daily", "check_static_arbitrage", "delta_to_moneyness",
    "implied_vol", "implied_vol_from_price", "moneyness_from_delta_fixed_vol", "phi_eval", "power_law_thresholds",
    "price_grid_oracle", "pssvi_implied_vol", "pssvi_total_variance", "total_variance",
]
