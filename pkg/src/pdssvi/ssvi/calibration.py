"""Daily calibration of SSVI and parsimonious SSVI surfaces to an implied-vol grid.

Grids are duck-typed: any object exposing ``maturities`` (M,), ``axis``
(``"moneyness"`` or ``"delta"``), ``axis_values`` (M, N) and ``vols`` (M, N)
works.  Delta-axis grids are converted to forward moneyness first.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from .blackscholes import bs_call_price, bs_delta, delta_to_moneyness
from .surface import (HESTON, MODIFIED_POWER_LAW, POWER_LAW, PhiParam, PssviParams, SsviSurface,
                      phi_eval, pssvi_implied_vol, ssvi_w)

DELTA_BAND = (0.1, 0.9)
RHO_MAX = 0.999
THETA_MIN = 1e-10
OBJ_SCALE = 1e4
INITIAL_GUESS = {"rho": -0.5, "lam": 1.0, "eta": 1.0, "gamma": 0.25}


class CalibrationError(RuntimeError):
    def __init__(self, message, best_iterate=None):
        super().__init__(message)
        self.best_iterate = best_iterate


@dataclass
class FitReport:
    """Per-point errors and summary statistics of a daily fit."""

    date: object
    maturities: np.ndarray
    log_strikes: list
    rel_errors: list
    mean_rel_err: float
    mean_price_err_bps: float
    objective: float
    initial_objective: float
    n_points: int
    converged: bool
    message: str = ""
    degenerate: bool = False
    notes: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"date": str(self.date), "mean_rel_err": self.mean_rel_err,
                "mean_price_err_bps": self.mean_price_err_bps, "objective": self.objective,
                "n_points": self.n_points, "converged": self.converged, "degenerate": self.degenerate}


def grid_to_moneyness(grid):
    """Return ``(maturities, [m_i], [vol_i])`` rows on a forward-moneyness axis."""
    T = np.asarray(grid.maturities, float)
    X = np.asarray(grid.axis_values, float)
    V = np.asarray(grid.vols, float)
    ms, vs = [], []
    for i, t in enumerate(T):
        x, v = X[i], V[i]
        if grid.axis == "delta":
            sig = v
            # the quoted vol is the vol at the quoted delta's own strike
            x = np.asarray(delta_to_moneyness(x, t, lambda k, tt, s=sig: s))
            order = np.argsort(x)
            x, v = x[order], v[order]
        elif grid.axis != "moneyness":
            raise ValueError(f"unknown axis kind {grid.axis!r}")
        ms.append(np.asarray(x, float))
        vs.append(np.asarray(v, float))
    return T, ms, vs


def _prepare(grid, delta_band):
    T, ms, vs = grid_to_moneyness(grid)
    ks, vols = [], []
    for t, m, v in zip(T, ms, vs):
        keep = np.ones(m.size, bool)
        if delta_band is not None:
            d = bs_delta(m, t, v, True)
            keep = (d >= delta_band[0]) & (d <= delta_band[1])
        ks.append(np.log(m[keep]))
        vols.append(v[keep])
    if sum(k.size for k in ks) == 0:
        raise ValueError("no quotes left after the delta filter")
    return T, ks, vols


def _atm_vols(T, ks, vols):
    out = np.empty(T.size)
    for i in range(T.size):
        k, v = ks[i], vols[i]
        if k.size == 0:
            out[i] = np.nan
        elif k.size == 1:
            out[i] = v[0]
        else:
            out[i] = np.interp(0.0, k, v)
    if np.all(np.isnan(out)):
        raise ValueError("no ATM information in the grid")
    # maturities without quotes borrow the nearest available ATM vol
    good = ~np.isnan(out)
    out[~good] = np.interp(T[~good], T[good], out[good])
    return out


def _report(date, T, ks, vols, model_vols, obj, obj0, res_ok, message, degenerate=False, notes=()):
    rel, price_err, n = [], [], 0
    for i, t in enumerate(T):
        mv, v, k = model_vols[i], vols[i], ks[i]
        rel.append(np.abs(mv - v) / v)
        m = np.exp(k)
        price_err.append(np.abs(bs_call_price(m, t, mv) - bs_call_price(m, t, v)) * 1e4)
        n += v.size
    all_rel = np.concatenate(rel) if rel else np.empty(0)
    all_pe = np.concatenate([np.atleast_1d(p) for p in price_err]) if price_err else np.empty(0)
    return FitReport(date, T, ks, rel, float(np.mean(all_rel)), float(np.mean(all_pe)), float(obj), float(obj0), n,
                     bool(res_ok), message, degenerate, list(notes))


def _phi_constraints(variant, rho, eta, gamma, lam):
    """Inequality constraints (``>= 0``) defining the admissible set for ``(rho, phi-params)``."""
    if variant == HESTON:
        return np.array([lam - (1.0 + rho) / 4.0, lam - (1.0 - rho) / 4.0])
    if variant == POWER_LAW:
        if gamma == 0.5:
            return np.array([4.0 - eta * eta * (1.0 + rho), 4.0 - eta * eta * (1.0 - rho)])
        return np.zeros(0)
    # modified power law, following the proof's case analysis; fixed length for SLSQP
    if gamma < 0.5:
        t = 1.0 - 2.0 * gamma
        peak = t * (eta / (t**gamma * (1.0 + t) ** (1.0 - gamma))) ** 2
    elif gamma == 0.5:
        peak = eta * eta
    else:
        # theta_T >= theta* is not imposed during calibration
        peak = 0.0
    return np.array([4.0 - eta * (1.0 + rho), 4.0 - eta * (1.0 - rho),
                     4.0 - peak * (1.0 + rho), 4.0 - peak * (1.0 - rho)])


def calibrate_ssvi_daily(grid, variant: str = MODIFIED_POWER_LAW, weights: str = "normal",
                         delta_band=DELTA_BAND, gamma: float | None = None, maxiter: int = 1000):
    """Fit an :class:`SsviSurface` to one day's grid by weighted least squares on implied vols.

    Parameters
    ----------
    grid : IvsGrid-like
    variant : {"heston-like", "power-law", "modified-power-law"}
    weights : {"normal", "uniform"}
        ``"normal"`` weights each quote by the standard normal density of its log-strike.
    delta_band : tuple or None
        Keep only quotes whose call delta lies in this band.
    gamma : float, optional
        Fix ``gamma`` instead of calibrating it (power-law variants only).

    Returns
    -------
    (SsviSurface, FitReport)
    """
    if variant not in (HESTON, POWER_LAW, MODIFIED_POWER_LAW):
        raise ValueError(f"unknown variant {variant!r}")
    T, ks, vols = _prepare(grid, delta_band)
    M = T.size
    wts = [norm.pdf(k) if weights == "normal" else np.ones_like(k) for k in ks]
    if weights not in ("normal", "uniform"):
        raise ValueError("weights must be 'normal' or 'uniform'")

    atm = _atm_vols(T, ks, vols)
    theta0 = np.maximum.accumulate(np.maximum(atm**2 * T, THETA_MIN))
    x_theta0 = np.diff(theta0, prepend=0.0)

    free_gamma = variant != HESTON and gamma is None
    x0 = list(x_theta0) + [INITIAL_GUESS["rho"]]
    bounds = [(THETA_MIN, None)] + [(0.0, None)] * (M - 1) + [(-RHO_MAX, RHO_MAX)]
    if variant == HESTON:
        x0 += [INITIAL_GUESS["lam"]]
        bounds += [(1e-6, None)]
    else:
        x0 += [INITIAL_GUESS["eta"]]
        bounds += [(1e-8, None)]
        if free_gamma:
            x0 += [INITIAL_GUESS["gamma"]]
            bounds += [(1e-3, 1.0 - 1e-3)]
    x0 = np.array(x0, float)

    def unpack(x):
        theta = np.cumsum(x[:M])
        rho = x[M]
        if variant == HESTON:
            return theta, rho, PhiParam.heston(max(x[M + 1], 1e-12))
        g = x[M + 2] if free_gamma else gamma
        return theta, rho, PhiParam(variant, eta=max(x[M + 1], 1e-12), gamma=g)

    def model_vols(x):
        theta, rho, phi = unpack(x)
        out = []
        for i in range(M):
            th = max(theta[i], THETA_MIN)
            w = ssvi_w(ks[i], th, rho, phi_eval(phi, th))
            out.append(np.sqrt(np.maximum(w, 0.0) / T[i]))
        return out

    def objective(x):
        mv = model_vols(x)
        return OBJ_SCALE * sum(float(np.dot(wts[i], (vols[i] - mv[i]) ** 2)) for i in range(M))

    def cons(x):
        _, rho, phi = unpack(x)
        return _phi_constraints(variant, rho, phi.eta, phi.gamma, phi.lam)

    # theta increments are orders of magnitude smaller than rho and the phi parameters
    scale = np.ones(x0.size)
    scale[:M] = max(theta0[-1] / M, 1e-8)
    scaled_bounds = [(None if lo is None else lo / s, None if hi is None else hi / s)
                     for (lo, hi), s in zip(bounds, scale)]
    constraints = [] if cons(x0).size == 0 else [{"type": "ineq", "fun": lambda y: cons(y * scale)}]
    obj0 = objective(x0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(lambda y: objective(y * scale), x0 / scale, method="SLSQP", bounds=scaled_bounds,
                       constraints=constraints, options={"ftol": 1e-14, "maxiter": maxiter})
    x = res.x * scale
    if not np.all(np.isfinite(x)) or not np.isfinite(res.fun):
        raise CalibrationError(f"SSVI calibration failed: {res.message}", best_iterate=x0)
    if res.fun > obj0:
        x, fun = x0, obj0
    else:
        fun = res.fun
    theta, rho, phi = unpack(x)
    surface = SsviSurface(tuple(T), tuple(np.maximum.accumulate(theta)), float(rho), phi)
    report = _report(getattr(grid, "date", None), T, ks, vols, model_vols(x), fun / OBJ_SCALE, obj0 / OBJ_SCALE,
                     res.success, str(res.message))
    return surface, report


def _project_pssvi(a, p, rho, eta):
    """Push ``eta`` down onto ``eta^2 (1+|rho|) <= 4`` if the solver left it marginally outside."""
    ar = 1.0 + abs(rho)
    while eta * eta * ar > 4.0:
        eta = min(np.nextafter(eta, 0.0), 2.0 / math.sqrt(ar))
    return PssviParams(float(max(a, 0.0)), float(max(p, 0.0)), float(rho), float(eta))


def calibrate_pssvi_daily(grid, delta_band=DELTA_BAND, weights: str = "normal", maxiter: int = 1000):
    """Fit the four parsimonious SSVI parameters ``(a, p, rho, eta)`` to one day's grid.

    Returns
    -------
    (PssviParams, FitReport)
        ``report.degenerate`` is set when only ATM quotes are available; then
        ``rho`` and ``eta`` keep their initial values.
    """
    T, ks, vols = _prepare(grid, delta_band)
    M = T.size
    wts = [norm.pdf(k) if weights == "normal" else np.ones_like(k) for k in ks]
    atm = _atm_vols(T, ks, vols)
    theta_hat = atm**2 * T
    rho0, eta0 = INITIAL_GUESS["rho"], INITIAL_GUESS["eta"]
    a0 = theta_hat[0] / T[0]
    x0 = np.array([a0, 1.0, rho0, eta0])

    # flattened quotes so that one objective call is a single vectorized evaluation
    kf = np.concatenate(ks)
    Tf = np.concatenate([np.full(k.size, t) for k, t in zip(ks, T)])
    vf = np.concatenate(vols)
    wf = np.concatenate(wts)
    splits = np.cumsum([k.size for k in ks])[:-1]

    def model_vols(x):
        return np.split(pssvi_implied_vol(x[0], x[1], x[2], x[3], kf, Tf), splits)

    def objective(x):
        mv = pssvi_implied_vol(x[0], x[1], x[2], x[3], kf, Tf)
        return OBJ_SCALE * float(np.dot(wf, (vf - mv) ** 2))

    step = 1e-20
    probe = np.eye(4) * 1j * step

    def gradient(x):
        # complex-step derivative, all four directions in one evaluation
        xc = x[:, None] + probe
        with np.errstate(invalid="ignore", divide="ignore"):
            mv = pssvi_implied_vol(xc[0][:, None], xc[1][:, None], xc[2][:, None], xc[3][:, None], kf, Tf)
            g = OBJ_SCALE * ((vf - mv) ** 2 @ wf).imag / step
        if np.all(np.isfinite(g)):
            return g
        h = 1e-7 * np.maximum(np.abs(x), 1.0)
        return np.array([(objective(x + h[j] * e) - objective(x - h[j] * e)) / (2 * h[j])
                         for j, e in enumerate(np.eye(4))])

    degenerate = all(np.all(np.abs(k) < 1e-12) for k in ks)
    obj0 = objective(x0)
    if degenerate:
        # only theta_T = a T^p is identified: fit it on ATM total variances
        good = theta_hat > 0
        if good.sum() >= 2:
            p, loga = np.polyfit(np.log(T[good]), np.log(theta_hat[good]), 1)
            x = np.array([math.exp(loga), max(p, 0.0), rho0, eta0])
        else:
            x = x0
        params = _project_pssvi(*x)
        report = _report(getattr(grid, "date", None), T, ks, vols, model_vols(x), objective(x) / OBJ_SCALE,
                         obj0 / OBJ_SCALE, True, "ATM-only grid: rho and eta unidentified", degenerate=True)
        return params, report

    bounds = [(0.0, None), (0.0, 5.0), (-RHO_MAX, RHO_MAX), (1e-8, 2.0)]
    constraints = [{"type": "ineq", "fun": lambda x: np.array([4.0 - x[3] ** 2 * (1.0 + x[2]),
                                                               4.0 - x[3] ** 2 * (1.0 - x[2])]),
                    "jac": lambda x: np.array([[0.0, 0.0, -x[3] ** 2, -2.0 * x[3] * (1.0 + x[2])],
                                               [0.0, 0.0, x[3] ** 2, -2.0 * x[3] * (1.0 - x[2])]])}]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(objective, x0, jac=gradient, method="SLSQP", bounds=bounds, constraints=constraints,
                       options={"ftol": 1e-15, "maxiter": maxiter})
    if not np.all(np.isfinite(res.x)) or not np.isfinite(res.fun):
        raise CalibrationError(f"parsimonious SSVI calibration failed: {res.message}", best_iterate=x0)
    x = res.x if res.fun <= obj0 else x0
    params = _project_pssvi(*x)
    xp = np.array([params.a, params.p, params.rho, params.eta])
    report = _report(getattr(grid, "date", None), T, ks, vols, model_vols(xp), objective(xp) / OBJ_SCALE,
                     obj0 / OBJ_SCALE, res.success, str(res.message))
    return params, report
