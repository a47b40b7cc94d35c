"""Sufficient static-arbitrage conditions for SSVI surfaces and a numerical price-grid oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .blackscholes import bs_call_price
from .surface import HESTON, MODIFIED_POWER_LAW, POWER_LAW, PssviParams, total_variance

THRESHOLD_XTOL = 1e-10

MPL_CASE_NOTE = (
    "modified power-law cases follow the proof's analysis of theta*phi(theta)^2: "
    "gamma in (0,1/2) needs the bound at theta = 1 - 2 gamma, gamma in (1/2,1) needs theta_T >= theta*; "
    "the published statement attaches these two conclusions to swapped gamma ranges"
)


@dataclass
class ArbitrageVerdict:
    free: bool
    violations: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def __bool__(self):
        return self.free


def _solve_increasing(f, target, lo=1e-12, hi=1.0):
    """Root of ``f(theta) = target`` for an increasing ``f`` on ``(0, inf)``."""
    while f(hi) < target:
        hi *= 2.0
        if hi > 1e12:
            return math.inf
    if f(lo) >= target:
        return lo
    return brentq(lambda t: f(t) - target, lo, hi, xtol=THRESHOLD_XTOL, rtol=1e-15, maxiter=500)


def _solve_decreasing(f, target, lo=1e-12, hi=1.0):
    return _solve_increasing(lambda t: -f(t), -target, lo, hi)


def power_law_thresholds(eta: float, gamma: float, rho: float) -> tuple[float, float]:
    """``(theta1*, theta2*)`` for the power law.

    ``theta1*`` is where ``theta phi(theta) (1+|rho|)`` reaches 4 (condition iii) and
    ``theta2*`` is where ``theta phi(theta)^2 (1+|rho|)`` reaches 4 (condition iv).
    ``theta2*`` is ``nan`` for ``gamma = 1/2`` where that map is constant.
    """
    c = 4.0 / (1.0 + abs(rho))
    t1 = _solve_increasing(lambda t: eta * t ** (1.0 - gamma), c)
    if gamma == 0.5:
        return t1, math.nan
    g = lambda t: eta * eta * t ** (1.0 - 2.0 * gamma)  # noqa: E731
    t2 = _solve_increasing(g, c) if gamma < 0.5 else _solve_decreasing(g, c)
    return t1, t2


def mpl_theta_star(eta: float, gamma: float, rho: float) -> float:
    """``theta*`` with ``theta* phi(theta*)^2 = 4 / (1+|rho|)`` for the modified power law, ``gamma > 1/2``."""
    if not gamma > 0.5:
        raise ValueError("theta* is only defined for gamma in (1/2, 1)")
    g = lambda t: eta * eta * t ** (1.0 - 2.0 * gamma) / (1.0 + t) ** (2.0 - 2.0 * gamma)  # noqa: E731
    return _solve_decreasing(g, 4.0 / (1.0 + abs(rho)))


def mpl_peak_value(eta: float, gamma: float) -> float:
    """Maximum of ``theta phi(theta)^2`` over ``theta > 0`` for the modified power law, ``gamma <= 1/2``."""
    if gamma == 0.5:
        return eta * eta
    t = 1.0 - 2.0 * gamma
    return t * phi_eval_mpl(eta, gamma, t) ** 2


def phi_eval_mpl(eta, gamma, theta):
    return eta / (theta**gamma * (1.0 + theta) ** (1.0 - gamma))


def check_static_arbitrage(surface) -> ArbitrageVerdict:
    """Evaluate the sufficient no-static-arbitrage conditions for ``surface``.

    The conditions are checked on the quoted ATM total variances (weak form),
    which is what the numerical oracle can confirm on a finite maturity set.
    """
    if isinstance(surface, PssviParams):
        return _check_pssvi(surface)
    violations, notes = [], []
    theta = np.asarray(surface.theta, float)
    rho, phi = surface.rho, surface.phi
    ar = 1.0 + abs(rho)
    if np.any(theta < 0):
        violations.append("negative ATM total variance")
    if np.any(np.diff(theta) < 0):
        violations.append("theta_T decreasing in T (calendar spread)")
    pos = theta[theta > 0]

    if phi.variant == HESTON:
        if phi.lam < ar / 4.0:
            violations.append(f"lambda={phi.lam:.6g} < (1+|rho|)/4={ar / 4.0:.6g}")
    elif phi.variant == POWER_LAW:
        eta, gamma = phi.eta, phi.gamma
        t1, t2 = power_law_thresholds(eta, gamma, rho)
        if gamma == 0.5 and eta * eta * ar > 4.0:
            violations.append(f"eta^2(1+|rho|)={eta * eta * ar:.6g} > 4")
        if pos.size and pos.max() >= t1:
            violations.append(f"theta_T={pos.max():.6g} >= theta1*={t1:.6g}")
        if gamma < 0.5 and pos.size and pos.max() >= t2:
            violations.append(f"theta_T={pos.max():.6g} >= theta2*={t2:.6g}")
        if gamma > 0.5 and pos.size and pos.min() <= t2:
            violations.append(f"theta_T={pos.min():.6g} <= theta2*={t2:.6g}")
    elif phi.variant == MODIFIED_POWER_LAW:
        eta, gamma = phi.eta, phi.gamma
        if gamma == 0.5:
            if eta * eta * ar > 4.0:
                violations.append(f"eta^2(1+|rho|)={eta * eta * ar:.6g} > 4")
        else:
            notes.append(MPL_CASE_NOTE)
            if eta * ar > 4.0:
                violations.append(f"eta(1+|rho|)={eta * ar:.6g} > 4")
            if gamma < 0.5:
                peak = mpl_peak_value(eta, gamma)
                if peak * ar > 4.0:
                    violations.append(f"(1-2gamma)phi(1-2gamma)^2(1+|rho|)={peak * ar:.6g} > 4")
            else:
                ts = mpl_theta_star(eta, gamma, rho)
                if pos.size and pos.min() < ts:
                    violations.append(f"theta_T={pos.min():.6g} < theta*={ts:.6g}")
    return ArbitrageVerdict(not violations, violations, notes)


def _check_pssvi(params: PssviParams) -> ArbitrageVerdict:
    violations = []
    if params.a < 0 or params.p < 0:
        violations.append("a and p must be >= 0 for theta_T to be non-decreasing")
    margin = params.arbitrage_margin()
    if margin < 0:
        violations.append(f"eta^2(1+|rho|)={4.0 - margin:.6g} > 4")
    return ArbitrageVerdict(not violations, violations, [])


@dataclass
class OracleResult:
    max_convexity_violation: float
    max_monotonicity_violation: float
    max_calendar_violation: float
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.max_convexity_violation, self.max_monotonicity_violation,
                   self.max_calendar_violation) <= self.tol


def price_grid_oracle(surface, maturities, n_strikes: int = 200, k_range=(-1.5, 1.5),
                      tol: float = 1e-10) -> OracleResult:
    """Brute-force static-arbitrage check on a strike x maturity grid.

    Butterfly: call prices must be convex and non-increasing in strike for each
    maturity.  Calendar: total variance must be non-decreasing in ``T`` at every
    log-strike.
    """
    T = np.asarray(maturities, float)
    k = np.linspace(k_range[0], k_range[1], n_strikes)
    m = np.exp(k)
    w = np.array([np.asarray(total_variance(surface, k, t)) for t in T])
    conv = mono = 0.0
    for i, t in enumerate(T):
        sig = np.sqrt(w[i] / t)
        c = bs_call_price(m, t, sig)
        slope = np.diff(c) / np.diff(m)
        conv = max(conv, float(np.max(-np.diff(slope), initial=0.0)))
        mono = max(mono, float(np.max(np.diff(c), initial=0.0)))
    cal = float(np.max(-np.diff(w, axis=0), initial=0.0)) if T.size > 1 else 0.0
    return OracleResult(conv, mono, cal, tol)


__all__ = [
    "ArbitrageVerdict", "OracleResult", "check_static_arbitrage", "mpl_theta_star", "mpl_peak_value",
    "power_law_thresholds", "price_grid_oracle",
]
