"""Path-dependent SSVI model: calibration from a historical panel and Monte Carlo simulation.

State variables are the index level ``S``, its PDV volatility ``sigma`` and the
parsimonious SSVI parameters ``(a, p, rho, eta)``:

* ``a = |b0 + b1 R1 + (b2 + eps_a) Sigma|`` and ``log p = b0 + b1 R1 + (b2 + eps_p) Sigma``
  with their own TSPL features of the index simple returns;
* ``eps_a`` and ``eps_p`` are centered OU processes;
* ``rho`` and ``eta`` are Jacobi processes on ``[-1, 1]`` and ``[0, sqrt 2]``.

The five driving Brownian motions ``(W^S, W^a, W^p, W^rho, W^eta)`` are
correlated through a 5x5 matrix in that order.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import pdv as pdv_mod
from .features import DT, TsplKernel, causal_filter, kernel_weights, kernel_weights_and_grads
from .pdv import PdvHyperParams, PdvParams
from .processes import (SQRT2, JacobiParams, OuParams, jacobi_estimate, jacobi_residuals,
                        jacobi_step_full_truncation, ou_mle, ou_step_exact)
from .ssvi.blackscholes import NoRootError, delta_to_moneyness
from .ssvi.calibration import calibrate_pssvi_daily
from .ssvi.surface import PssviParams, pssvi_total_variance

SIGMA_FLOOR = 1e-4
# largest double whose square times 2 stays <= 4, so eta^2 (1 + |rho|) <= 4 holds exactly
ETA_CAP = float(np.nextafter(SQRT2, 0.0))
FACTORS = ("S", "a", "p", "rho", "eta")
CHUNK = 64
DEGENERATE_STD = 1e-8
ASSET_CUTOFFS = (1000, 1000)


class JointFitError(RuntimeError):
    """A calibration stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class AssetFitError(RuntimeError):
    def __init__(self, message, best_iterate=None):
        super().__init__(message)
        self.best_iterate = best_iterate


class NonPositiveVolError(ValueError):
    def __init__(self, step, value):
        super().__init__(f"PDV volatility {value:.6g} <= 0 at return position {step}: likelihood undefined")
        self.step = step


# ----------------------------------------------------------------------------- parameters


@dataclass(frozen=True)
class AssetPdvParams:
    """Index dynamics: annual drift ``mu`` and the PDV volatility ``sigma = b0 + b1 R1 + b2 Sigma``."""

    mu: float
    pdv: PdvParams
    sigma_floor: float = SIGMA_FLOOR

    @property
    def warmup(self) -> int:
        return max(self.pdv.kernel1.cutoff, self.pdv.kernel2.cutoff)

    @property
    def dt(self) -> float:
        return self.pdv.kernel1.dt

    def stationary_vol(self) -> float:
        """Fixed point of ``sigma = b0 + b1 mu + b2 sigma`` (features replaced by their means)."""
        b = self.pdv
        if b.beta2 >= 1.0:
            raise ValueError("no stationary level for beta2 >= 1")
        return (b.beta0 + b.beta1 * self.mu) / (1.0 - b.beta2)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.mu], self.pdv.as_vector()])

    @classmethod
    def from_vector(cls, x, c_r1: int, c_sigma: int, dt: float = DT) -> "AssetPdvParams":
        return cls(float(x[0]), PdvParams.from_vector(x[1:], c_r1, c_sigma, dt))

    def to_dict(self) -> dict:
        d = self.pdv.to_dict()
        d["mu"] = self.mu
        return d

    @classmethod
    def from_dict(cls, d) -> "AssetPdvParams":
        return cls(float(d["mu"]), PdvParams.from_dict(d))


def repair_correlation(corr) -> tuple[np.ndarray, float]:
    """Nearest PSD correlation by eigenvalue clipping at 0 then diagonal rescaling.

    Returns the repaired matrix and the max-abs entry change.
    """
    c = np.asarray(corr, float)
    c = 0.5 * (c + c.T)
    vals, vecs = np.linalg.eigh(c)
    if vals.min() >= 0.0:
        out = c.copy()
    else:
        out = (vecs * np.maximum(vals, 0.0)) @ vecs.T
        d = np.sqrt(np.diag(out))
        if np.any(d == 0):
            raise ValueError("correlation repair produced a zero variance")
        out = out / np.outer(d, d)
        out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 1.0)
    return out, float(np.max(np.abs(out - c)))


def lower_factor(corr, tol: float = 1e-12) -> np.ndarray:
    """Lower-triangular ``L`` with ``L L^T = corr``, tolerating zero pivots (singular PSD input)."""
    c = np.asarray(corr, float)
    n = c.shape[0]
    L = np.zeros_like(c)
    for j in range(n):
        d = c[j, j] - np.dot(L[j, :j], L[j, :j])
        if d < -tol:
            raise ValueError("correlation matrix is not positive semi-definite")
        if d <= tol:
            continue
        L[j, j] = math.sqrt(d)
        for i in range(j + 1, n):
            L[i, j] = (c[i, j] - np.dot(L[i, :j], L[j, :j])) / L[j, j]
    if np.max(np.abs(L @ L.T - c)) > 1e-8:
        raise ValueError("correlation matrix is not positive semi-definite")
    return L


@dataclass(frozen=True)
class JointModelParams:
    asset: AssetPdvParams
    a: PdvParams
    p: PdvParams
    eps_a: OuParams
    eps_p: OuParams
    rho: JacobiParams
    eta: JacobiParams
    correlation: np.ndarray = field(default_factory=lambda: np.eye(5), compare=False)

    def __post_init__(self):
        c = np.array(self.correlation, dtype=float)
        if c.shape != (5, 5):
            raise ValueError("correlation matrix must be 5x5")
        if not np.allclose(c, c.T, atol=1e-12) or not np.allclose(np.diag(c), 1.0, atol=1e-12):
            raise ValueError("correlation matrix must be symmetric with unit diagonal")
        if np.linalg.eigvalsh(c).min() < -1e-10:
            raise ValueError("correlation matrix is not positive semi-definite")
        object.__setattr__(self, "correlation", c)
        if (self.rho.lo, self.rho.hi) != (-1.0, 1.0) or (self.eta.lo, self.eta.hi) != (0.0, SQRT2):
            raise ValueError("rho must live on [-1, 1] and eta on [0, sqrt 2]")

    @property
    def dt(self) -> float:
        return self.asset.dt

    @property
    def warmup(self) -> int:
        """Largest cut-off lag over all features."""
        return max(self.asset.warmup, self.a.kernel1.cutoff, self.a.kernel2.cutoff,
                   self.p.kernel1.cutoff, self.p.kernel2.cutoff)

    def to_dict(self) -> dict:
        return {
            "S": self.asset.to_dict(), "a": self.a.to_dict(), "p": self.p.to_dict(),
            "eps_a": {"kappa": self.eps_a.kappa, "gamma": self.eps_a.gamma},
            "eps_p": {"kappa": self.eps_p.kappa, "gamma": self.eps_p.gamma},
            "rho": {"kappa": self.rho.kappa, "mu": self.rho.mu, "gamma": self.rho.gamma},
            "eta": {"kappa": self.eta.kappa, "mu": self.eta.mu, "gamma": self.eta.gamma},
            "correlation": {"order": list(FACTORS), "matrix": self.correlation.tolist()},
        }

    @classmethod
    def from_dict(cls, d) -> "JointModelParams":
        corr = d.get("correlation", np.eye(5))
        if isinstance(corr, dict):
            if list(corr.get("order", FACTORS)) != list(FACTORS):
                raise ValueError(f"correlation order must be {list(FACTORS)}")
            corr = corr["matrix"]
        return cls(AssetPdvParams.from_dict(d["S"]), PdvParams.from_dict(d["a"]), PdvParams.from_dict(d["p"]),
                   OuParams(d["eps_a"]["kappa"], d["eps_a"]["gamma"]),
                   OuParams(d["eps_p"]["kappa"], d["eps_p"]["gamma"]),
                   JacobiParams(d["rho"]["kappa"], d["rho"]["mu"], d["rho"]["gamma"], -1.0, 1.0),
                   JacobiParams(d["eta"]["kappa"], d["eta"]["mu"], d["eta"]["gamma"], 0.0, SQRT2),
                   np.asarray(corr, float))

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "JointModelParams":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def preset(cls, name: str) -> "JointModelParams":
        """Published S&P 500 (``"spx"``) or Euro Stoxx 50 (``"sx5e"``) estimates.

        Correlations were not published, so the preset uses independent drivers.
        """
        try:
            return cls.from_dict(PRESETS[name])
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def _pdv(a1, d1, a2, d2, b0, b1, b2, c1, c2, **extra):
    out = {"alpha1": a1, "delta1": d1, "alpha2": a2, "delta2": d2, "beta0": b0, "beta1": b1, "beta2": b2,
           "c_r1": c1, "c_sigma": c2}
    out.update(extra)
    return out


PRESETS = {
    "spx": {
        "S": _pdv(7.74, 0.12, 2.42, 0.06, 0.03, -0.04, 0.84, *ASSET_CUTOFFS, mu=0.07),
        "a": _pdv(1.12, 0.03, 0.88, 0.03, -8.71e-4, -0.02, 0.22, 1500, 1000),
        "p": _pdv(1.01, 0.02, 0.78, 0.01, 0.36, 0.11, -1.35, 50, 100),
        "eps_a": {"kappa": 16.3, "gamma": 0.11},
        "eps_p": {"kappa": 26.4, "gamma": 3.24},
        "rho": {"kappa": 60.4, "mu": -0.71, "gamma": 0.99},
        "eta": {"kappa": 8.86, "mu": 0.93, "gamma": 0.62},
    },
    "sx5e": {
        "S": _pdv(2.01, 0.03, 2.01, 0.05, 0.04, -0.04, 0.80, *ASSET_CUTOFFS, mu=0.06),
        "a": _pdv(0.35, 1.85e-3, 1.04, 0.07, -0.01, -2.67e-3, 0.25, 10, 1500),
        "p": _pdv(0.57, 0.01, 0.99, 0.01, 0.25, 0.27, -1.05, 250, 50),
        "eps_a": {"kappa": 12.1, "gamma": 0.10},
        "eps_p": {"kappa": 17.7, "gamma": 2.62},
        "rho": {"kappa": 12.7, "mu": -0.56, "gamma": 0.31},
        "eta": {"kappa": 3.89, "mu": 0.83, "gamma": 0.53},
    },
}

# cut-offs and penalties for the a and p regressions of each preset
PRESET_HYPER = {
    "spx": {"a": PdvHyperParams(1500, 1000, 1e-4), "p": PdvHyperParams(50, 100, 1e-1)},
    "sx5e": {"a": PdvHyperParams(10, 1500, 1e-3), "p": PdvHyperParams(250, 50, 1e-1)},
}


# ----------------------------------------------------------------------------- asset likelihood


def _asset_features(x, simple, c_r1, c_sigma, dt, idx, grads=False):
    k1 = TsplKernel(x[1], x[2], c_r1, dt)
    k2 = TsplKernel(x[3], x[4], c_sigma, dt)
    r2 = simple * simple
    if not grads:
        R1 = causal_filter(simple, kernel_weights(k1))[idx]
        S = np.sqrt(np.maximum(causal_filter(r2, kernel_weights(k2))[idx], 0.0))
        return R1, S
    w1, w1a, w1d = kernel_weights_and_grads(k1)
    w2, w2a, w2d = kernel_weights_and_grads(k2)
    R1 = causal_filter(simple, w1)[idx]
    S = np.sqrt(np.maximum(causal_filter(r2, w2)[idx], 0.0))
    inv = 0.5 / np.maximum(S, 1e-300)
    return (R1, S, causal_filter(simple, w1a)[idx], causal_filter(simple, w1d)[idx],
            causal_filter(r2, w2a)[idx] * inv, causal_filter(r2, w2d)[idx] * inv)


def _loglik_terms(x, log_returns, c_r1, c_sigma, dt, start, grads=False):
    r = np.asarray(log_returns, float)
    simple = np.expm1(r)
    idx = np.arange(start, r.size - 1)
    feats = _asset_features(x, simple, c_r1, c_sigma, dt, idx, grads)
    R1, S = feats[0], feats[1]
    sigma = x[5] + x[6] * R1 + x[7] * S
    return r[idx + 1], idx, sigma, feats


def _check_start(n, start, warmup):
    if start < warmup:
        raise ValueError(f"insufficient warm-up: first volatility at position {start} needs {warmup} earlier "
                         "returns")
    if start >= n - 1:
        raise ValueError("no log-returns left after the warm-up")


def asset_loglikelihood(params: AssetPdvParams, log_returns, dt: float | None = None,
                        start: int | None = None) -> float:
    """Gaussian log-likelihood of ``log_returns[start+1:]`` under the discretized PDV asset model.

    ``sigma`` at position ``k`` uses the simple returns up to and including ``k``
    and prices the log-return at ``k + 1``.  ``start`` defaults to the warm-up.
    """
    dt = params.dt if dt is None else dt
    if not math.isclose(dt, params.dt, rel_tol=1e-12):
        raise ValueError("dt disagrees with the kernel time step")
    start = params.warmup if start is None else start
    r = np.asarray(log_returns, float)
    _check_start(r.size, start, params.warmup)
    y, idx, sigma, _ = _loglik_terms(params.as_vector(), r, params.pdv.kernel1.cutoff,
                                     params.pdv.kernel2.cutoff, dt, start)
    if np.any(sigma <= 0):
        k = int(np.flatnonzero(sigma <= 0)[0])
        raise NonPositiveVolError(int(idx[k]), float(sigma[k]))
    var = sigma * sigma * dt
    e = y - (params.mu - 0.5 * sigma * sigma) * dt
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * var) + e * e / var))


class _AssetObjective:
    """Mean negative log-likelihood and its gradient in the 8 asset parameters."""

    def __init__(self, log_returns, c_r1, c_sigma, dt, start):
        self.r, self.c1, self.c2, self.dt, self.start = log_returns, c_r1, c_sigma, dt, start
        self.n = log_returns.size - 1 - start
        self.best = (math.inf, None)

    def __call__(self, x):
        y, _, sigma, f = _loglik_terms(x, self.r, self.c1, self.c2, self.dt, self.start, grads=True)
        if not np.all(sigma > 0) or not np.all(np.isfinite(sigma)):
            return 1e10, np.zeros_like(x)
        R1, S, dRa, dRd, dSa, dSd = f
        dt = self.dt
        s2 = sigma * sigma
        e = y - (x[0] - 0.5 * s2) * dt
        ll = -0.5 * np.sum(np.log(2.0 * np.pi * s2 * dt) + e * e / (s2 * dt))
        dsig = -1.0 / sigma - e / sigma + e * e / (s2 * sigma * dt)
        g = np.empty(8)
        g[0] = np.sum(e / s2)
        g[1] = np.dot(dsig, x[6] * dRa)
        g[2] = np.dot(dsig, x[6] * dRd)
        g[3] = np.dot(dsig, x[7] * dSa)
        g[4] = np.dot(dsig, x[7] * dSd)
        g[5] = dsig.sum()
        g[6] = np.dot(dsig, R1)
        g[7] = np.dot(dsig, S)
        f_val = -ll / self.n
        if f_val < self.best[0]:
            self.best = (f_val, x.copy())
        return f_val, -g / self.n


def realized_vol_proxy(log_returns, horizon: int = 5, dt: float = DT) -> np.ndarray:
    """Realized-volatility proxy aligned with each position ``k``.

    Annualized ``sqrt(pi/2) * mean|r|`` over the next ``horizon`` returns (fewer at
    the end of the series), an approximately unbiased estimate of the volatility
    in force at ``k``; it is only used to initialize the likelihood search.
    """
    r = np.abs(np.asarray(log_returns, float))
    n = r.size
    c = np.concatenate([[0.0], np.cumsum(r)])
    k = np.arange(n)
    hi = np.minimum(k + 1 + horizon, n)
    lo = np.minimum(k + 1, n - 1)
    cnt = np.maximum(hi - lo, 1)
    mean_abs = np.where(hi > lo, (c[hi] - c[lo]) / cnt, r[-1])
    return math.sqrt(math.pi / 2.0) * mean_abs / math.sqrt(dt)


def fit_asset(log_returns, dt: float = DT, init: AssetPdvParams | None = None, cutoffs=ASSET_CUTOFFS,
              proxy=None, start: int | None = None, maxiter: int = 2000) -> AssetPdvParams:
    """Maximum-likelihood estimate of ``(mu, alpha1, delta1, alpha2, delta2, b0, b1, b2)``.

    The starting point is ``init`` if given, else the three-stage PDV fit of a
    realized-volatility proxy (``proxy`` or :func:`realized_vol_proxy`) on the
    simple returns.
    """
    r = np.asarray(log_returns, float)
    c1, c2 = (init.pdv.kernel1.cutoff, init.pdv.kernel2.cutoff) if init is not None else map(int, cutoffs)
    warm = max(c1, c2)
    start = warm if start is None else start
    _check_start(r.size, start, warm)
    if init is None:
        target = realized_vol_proxy(r, dt=dt) if proxy is None else np.asarray(proxy, float)
        if target.shape != r.shape:
            raise ValueError("proxy must be aligned with the log-returns")
        idx = np.arange(start, r.size)
        rep = pdv_mod.calibrate(target[idx], np.expm1(r), PdvHyperParams(c1, c2), index=idx, dt=dt, acf_lags=())
        s_mean = float(np.mean(rep.params.predict(np.expm1(r), idx)))
        mu0 = float(np.mean(r[start + 1:]) / dt + 0.5 * s_mean * s_mean)
        x0 = np.concatenate([[mu0], rep.params.as_vector()])
    else:
        x0 = init.as_vector()
    lo = np.array([-np.inf, pdv_mod.ALPHA_BOUNDS[0], pdv_mod.DELTA_BOUNDS[0], pdv_mod.ALPHA_BOUNDS[0],
                   pdv_mod.DELTA_BOUNDS[0], -np.inf, -np.inf, -np.inf])
    hi = np.array([np.inf, pdv_mod.ALPHA_BOUNDS[1], pdv_mod.DELTA_BOUNDS[1], pdv_mod.ALPHA_BOUNDS[1],
                   pdv_mod.DELTA_BOUNDS[1], np.inf, np.inf, np.inf])
    x0 = np.clip(x0, lo, hi)
    obj = _AssetObjective(r, c1, c2, dt, start)
    if obj(x0)[0] >= 1e10:
        raise AssetFitError("starting point gives a non-positive volatility", best_iterate=x0)
    scale = np.maximum(np.abs(x0), np.array([0.05, 0.5, 0.01, 0.5, 0.01, 0.01, 0.01, 0.05]))

    def scaled(y):
        f, g = obj(y * scale)
        return f, g * scale

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        res = minimize(scaled, x0 / scale, jac=True, method="L-BFGS-B",
                       bounds=list(zip(lo / scale, hi / scale)),
                       options={"maxiter": maxiter, "ftol": 1e-15, "gtol": 1e-10, "maxcor": 20})
    x = obj.best[1]
    if x is None or not np.all(np.isfinite(x)):
        raise AssetFitError(f"asset likelihood maximization failed: {res.message}", best_iterate=x0)
    if res.status == 1:
        raise AssetFitError(f"asset likelihood maximization hit the iteration limit: {res.message}",
                            best_iterate=AssetPdvParams.from_vector(x, c1, c2, dt))
    return AssetPdvParams.from_vector(x, c1, c2, dt)


def asset_sigma(params: AssetPdvParams, simple_returns, index) -> np.ndarray:
    """Unfloored PDV volatility at the given return positions."""
    return params.pdv.predict(np.asarray(simple_returns, float), index)


# ----------------------------------------------------------------------------- joint calibration


@dataclass
class JointFit:
    params: JointModelParams
    daily: list
    reports: dict
    residuals: dict
    correlation_raw: np.ndarray
    repair: float
    degenerate: bool
    notes: list


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except JointFitError:
        raise
    except Exception as exc:  # noqa: BLE001 - any stage failure is relabelled
        raise JointFitError(name, f"{type(exc).__name__}: {exc}") from exc


def _inside(x, lo, hi, margin=1e-6):
    return np.clip(x, lo + margin, hi - margin)


def fit_joint(panel, hyper=None, daily=None, asset_init: AssetPdvParams | None = None,
              asset_cutoffs=ASSET_CUTOFFS, return_details: bool = False):
    """Calibrate every block of the joint model on a (train) panel.

    Parameters
    ----------
    panel : IvsPanel
        Filtered train panel; its price history supplies the warm-up.
    hyper : dict, optional
        ``{"a": PdvHyperParams, "p": PdvHyperParams}``; defaults to the S&P 500 cut-offs.
    daily : list of PssviParams, optional
        Pre-computed daily parameters aligned with ``panel.dates``.
    """
    hyper = dict(PRESET_HYPER["spx"]) if hyper is None else hyper
    dt = panel.prices.dt
    notes = []
    log_r = panel.prices.log_returns()
    simple = panel.prices.returns()

    asset = _stage("asset", fit_asset, log_r, dt, asset_init, asset_cutoffs)

    if daily is None:
        daily = [_stage(f"ssvi {g.date}", calibrate_pssvi_daily, g)[0] for g in panel.grids]
    if len(daily) != len(panel):
        raise JointFitError("ssvi", "daily parameters are not aligned with the panel dates")
    a = np.array([d.a for d in daily])
    p = np.array([d.p for d in daily])
    rho = np.array([d.rho for d in daily])
    eta = np.array([d.eta for d in daily])
    ridx = panel.price_index() - 1
    if np.any(p <= 0):
        raise JointFitError("pdv p", f"p = 0 on {panel.dates[int(np.flatnonzero(p <= 0)[0])]}: log p undefined")

    reports = {}
    reports["a"] = _stage("pdv a", pdv_mod.calibrate, a, simple, hyper["a"], index=ridx, dt=dt)
    reports["p"] = _stage("pdv p", pdv_mod.calibrate, np.log(p), simple, hyper["p"], index=ridx, dt=dt)

    eps = {}
    for name, y in (("a", a), ("p", np.log(p))):
        prm = reports[name].params
        R1, S = prm.features(simple, ridx)
        if np.any(S == 0):
            raise JointFitError(f"residuals {name}",
                                f"Sigma^{name} = 0 on {panel.dates[int(np.flatnonzero(S == 0)[0])]}")
        eps[name] = (y - prm.beta0 - prm.beta1 * R1) / S - prm.beta2

    degenerate = False
    ou = {}
    for name in ("a", "p"):
        try:
            ou[name] = _stage(f"ou {name}", ou_mle, eps[name], dt)
        except JointFitError:
            if np.max(np.abs(eps[name])) > DEGENERATE_STD:
                raise
            ou[name] = OuParams(1.0, 0.0)
        if ou[name].stationary_std() < DEGENERATE_STD:
            degenerate = True
            notes.append(f"eps_{name} has no noise (gamma = {ou[name].gamma:.3g}): correlation stage degenerate")

    jac = {}
    for name, series, lo, hi in (("rho", rho, -1.0, 1.0), ("eta", eta, 0.0, SQRT2)):
        clipped = _inside(series, lo, hi)
        if np.any(clipped != series):
            notes.append(f"{name}: {int(np.sum(clipped != series))} observations moved inside ({lo}, {hi})")
        if np.ptp(clipped) == 0.0:
            degenerate = True
            notes.append(f"{name} is constant: Jacobi noise set to 0, correlation stage degenerate")
            jac[name] = JacobiParams(1.0, float(clipped[0]), 0.0, lo, hi)
        else:
            jac[name] = _stage(f"jacobi {name}", jacobi_estimate, clipped, dt, lo, hi)
        if name == "rho":
            rho = clipped
        else:
            eta = clipped

    # standardized residuals on consecutive panel dates
    pidx = panel.price_index()
    sig = asset_sigma(asset, simple, np.maximum(pidx[:-1] - 1, 0))
    h = np.diff(pidx)
    logp = np.log(panel.prices.closes)
    big_r = logp[pidx[1:]] - logp[pidx[:-1]]
    ok = (pidx[:-1] - 1 >= asset.warmup) & (sig > 0)
    res = {"S": np.where(ok, (big_r - (asset.mu - 0.5 * sig * sig) * h * dt) / (np.abs(sig) * np.sqrt(h * dt)),
                         np.nan)}
    for name in ("a", "p"):
        s = ou[name].step_std(dt)
        res[name] = (eps[name][1:] - eps[name][:-1] * math.exp(-ou[name].kappa * dt)) / s if s > 0 else None
    for name, series in (("rho", rho), ("eta", eta)):
        res[name] = jacobi_residuals(series, jac[name], dt) if jac[name].gamma > 0 else None
    if np.any(h != 1):
        notes.append(f"{int(np.sum(h != 1))} panel gaps treated as single steps in the OU/Jacobi residuals")

    live = [i for i, f in enumerate(FACTORS) if res[f] is not None]
    corr_raw = np.eye(5)
    if len(live) >= 2:
        M = np.vstack([res[FACTORS[i]] for i in live])
        M = M[:, np.all(np.isfinite(M), axis=0)]
        if M.shape[1] < 3:
            raise JointFitError("correlation", "fewer than 3 complete residual observations")
        sd = M.std(axis=1)
        keep = sd > 0
        sub = np.eye(len(live))
        if keep.sum() >= 2:
            sub[np.ix_(keep, keep)] = np.corrcoef(M[keep])
        corr_raw[np.ix_(live, live)] = sub
    corr, repair = repair_correlation(corr_raw)
    if repair > 0:
        notes.append(f"correlation repaired to PSD (max entry change {repair:.3g})")

    params = JointModelParams(asset, reports["a"].params, reports["p"].params, ou["a"], ou["p"],
                              jac["rho"], jac["eta"], corr)
    if not return_details:
        return params
    return JointFit(params, daily, reports, {**{f"eps_{k}": v for k, v in eps.items()}, **res}, corr_raw,
                    repair, degenerate, notes)


# ----------------------------------------------------------------------------- simulation


@dataclass
class SimulationConfig:
    """Monte Carlo set-up.

    ``warmup_returns`` are simple returns ending at the simulation start; they
    must cover the largest cut-off (``warmup + 1`` values, lag 0 included).  In
    conditional mode ``price_path`` holds the simple returns of the ``horizon``
    following days and the index is not simulated.
    """

    n_paths: int
    horizon: int
    seed: int
    warmup_returns: np.ndarray
    dt: float = DT
    mode: str = "unconditional"
    price_path: np.ndarray | None = None
    eps_a0: float = 0.0
    eps_p0: float = 0.0
    rho0: float | None = None
    eta0: float | None = None
    s0: float = 1.0
    threads: int = 1
    chunk: int = CHUNK

    def __post_init__(self):
        if self.n_paths < 1 or self.horizon < 0:
            raise ValueError("need n_paths >= 1 and horizon >= 0")
        if self.mode not in ("conditional", "unconditional"):
            raise ValueError(f"unknown mode {self.mode!r}")
        self.warmup_returns = np.asarray(self.warmup_returns, float)
        if self.mode == "conditional":
            if self.price_path is None:
                raise ValueError("conditional mode needs the historical price path")
            self.price_path = np.asarray(self.price_path, float)
            if self.price_path.size != self.horizon:
                raise ValueError("price_path must hold one simple return per step")
        if self.threads < 1 or self.chunk < 1:
            raise ValueError("threads and chunk must be >= 1")


@dataclass
class SurfacePathSet:
    """Simulated paths; arrays are ``(n_paths, horizon + 1)`` with step 0 the initial state."""

    S: np.ndarray
    sigma: np.ndarray
    a: np.ndarray
    p: np.ndarray
    rho: np.ndarray
    eta: np.ndarray
    eps_a: np.ndarray
    eps_p: np.ndarray
    dt: float
    sigma_floor_events: int = 0
    abs_a_events: int = 0
    dates: np.ndarray | None = None
    warmup_returns: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.a.shape[0]

    @property
    def n_steps(self) -> int:
        return self.a.shape[1] - 1

    def log_returns(self) -> np.ndarray:
        return np.diff(np.log(self.S), axis=1)

    def arbitrage_audit(self) -> dict:
        """Per-step check of ``a, p >= 0``, ``rho`` in [-1, 1], ``eta`` in [0, sqrt 2] and ``eta^2 (1+|rho|) <= 4``."""
        bad_ap = int(np.sum((self.a < 0) | (self.p < 0)))
        bad_rho = int(np.sum(np.abs(self.rho) > 1))
        bad_eta = int(np.sum((self.eta < 0) | (self.eta > SQRT2)))
        bad_bf = int(np.sum(self.eta ** 2 * (1.0 + np.abs(self.rho)) > 4.0))
        return {"steps": int(self.a.size), "calendar": bad_ap, "rho_bounds": bad_rho, "eta_bounds": bad_eta,
                "butterfly": bad_bf, "violations": bad_ap + bad_rho + bad_eta + bad_bf,
                "sigma_floor_events": self.sigma_floor_events, "abs_a_events": self.abs_a_events}

    def implied_vols(self, maturities, axis_values, axis: str = "moneyness", paths=None, steps=None):
        """Implied vols ``(n_paths, n_steps, M, N)`` on the requested grid."""
        sl_p = slice(None) if paths is None else paths
        sl_s = slice(None) if steps is None else steps
        return evaluate_surface((self.a[sl_p][:, sl_s], self.p[sl_p][:, sl_s], self.rho[sl_p][:, sl_s],
                                 self.eta[sl_p][:, sl_s]), maturities, axis_values, axis)

    def atm_vol(self, T: float) -> np.ndarray:
        return np.sqrt(self.a * T ** (self.p - 1.0))

    def step_labels(self):
        if self.dates is not None:
            return [str(d) for d in self.dates]
        return [str(i) for i in range(self.n_steps + 1)]

    def to_parameter_csv(self, path) -> None:
        labels = self.step_labels()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "step", "S", "sigma", "a", "p", "rho", "eta", "eps_a", "eps_p"])
            for i in range(self.n_paths):
                for s in range(self.n_steps + 1):
                    w.writerow([i, labels[s], *(repr(float(x[i, s])) for x in
                               (self.S, self.sigma, self.a, self.p, self.rho, self.eta, self.eps_a, self.eps_p))])

    @classmethod
    def from_parameter_csv(cls, path, dt: float = DT, warmup_returns=None) -> "SurfacePathSet":
        """Read back :meth:`to_parameter_csv` output (event counters are not stored there)."""
        cols = ("S", "sigma", "a", "p", "rho", "eta", "eps_a", "eps_p")
        rows, labels = {}, []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["path", "step", *cols]:
                raise ValueError(f"{path}: unexpected header {header}")
            for row in reader:
                i = int(row[0])
                if i == 0:
                    labels.append(row[1])
                rows.setdefault(i, []).append([float(x) for x in row[2:]])
        if not rows:
            raise ValueError(f"{path}: no rows")
        arr = np.array([rows[i] for i in sorted(rows)])  # (P, steps, 8)
        data = {c: arr[:, :, j] for j, c in enumerate(cols)}
        dates = None
        if labels and all(len(x) == 10 and x[4] == "-" for x in labels):
            dates = np.array(labels, dtype="datetime64[D]")
        return cls(dt=dt, dates=dates, warmup_returns=None if warmup_returns is None else np.asarray(
            warmup_returns, float), **data)

    def to_ivs_csv(self, path, maturities, axis_values, axis: str = "moneyness", paths=None) -> None:
        """Long-format gridded vols ``(path, date, maturity_months, axis_value, vol)``."""
        T = np.asarray(maturities, float)
        x = np.asarray(axis_values, float)
        labels = self.step_labels()
        chosen = range(self.n_paths) if paths is None else paths
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "date", "maturity_months", "axis_value", "vol"])
            for i in chosen:
                vols = self.implied_vols(T, x, axis, paths=[i])[0]
                for s in range(self.n_steps + 1):
                    for m, t in enumerate(T):
                        months = round(t * 12.0, 10)
                        for n, v in enumerate(x):
                            w.writerow([i, labels[s], repr(months), repr(float(v)), repr(float(vols[s, m, n]))])


def evaluate_surface(state, maturities, axis_values, axis: str = "moneyness") -> np.ndarray:
    """Implied vols of parsimonious SSVI states on a maturity x (moneyness | delta) grid.

    ``state`` is ``(a, p, rho, eta)``, scalars or arrays of a common shape ``B``;
    the result has shape ``B + (M, N)``.  On a delta axis each point is solved by
    Newton iteration with the state's own smile; failures are returned as NaN.
    """
    a, p, rho, eta = (np.asarray(s, float) for s in state)
    a, p, rho, eta = np.broadcast_arrays(a, p, rho, eta)
    T = np.asarray(maturities, float)
    x = np.asarray(axis_values, float)
    if np.any(T <= 0):
        raise ValueError("maturities must be positive")
    if np.any(a < 0) or np.any(p < 0) or np.any(np.abs(rho) > 1) or np.any(eta < 0):
        raise ValueError("state out of bounds")
    ex = (Ellipsis, None, None)
    if axis == "moneyness":
        if np.any(x <= 0):
            raise ValueError("moneyness values must be positive")
        k = np.log(x)[None, :]
        w = pssvi_total_variance(a[ex], p[ex], rho[ex], eta[ex], k, T[:, None])
        return np.sqrt(w / T[:, None])
    if axis != "delta":
        raise ValueError(f"unknown axis {axis!r}")
    out = np.full(a.shape + (T.size, x.size), np.nan)
    for pos in np.ndindex(a.shape):
        s = (a[pos], p[pos], rho[pos], eta[pos])

        def vol(kk, tt, s=s):
            return np.sqrt(pssvi_total_variance(s[0], s[1], s[2], s[3], kk, tt) / tt)

        TT, XX = np.meshgrid(T, x, indexing="ij")
        try:
            m = delta_to_moneyness(XX, TT, vol)
            out[pos] = vol(np.log(m), TT)
        except NoRootError:
            for i, j in np.ndindex(TT.shape):
                try:
                    m = delta_to_moneyness(XX[i, j], TT[i, j], vol)
                    out[pos + (i, j)] = vol(math.log(m), TT[i, j])
                except NoRootError:
                    pass
    return out


def warmup_history(params: JointModelParams | AssetPdvParams, seed: int, burn_in: int = 1000,
                   length: int | None = None) -> np.ndarray:
    """Simple-return history for unconditional runs.

    Starts from i.i.d. Gaussian returns at the stationary volatility, then runs
    the PDV asset model for ``burn_in`` further days; the last ``length``
    (default: warm-up + 1) returns are kept.
    """
    asset = params.asset if isinstance(params, JointModelParams) else params
    need = (params.warmup if isinstance(params, JointModelParams) else asset.warmup) + 1
    length = need if length is None else length
    if length < need:
        raise ValueError(f"warm-up history needs at least {need} returns")
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    dt = asset.dt
    s0 = asset.stationary_vol()
    n0 = max(length, asset.warmup + 1)
    z = rng.standard_normal(n0 + burn_in)
    logr = (asset.mu - 0.5 * s0 * s0) * dt + s0 * math.sqrt(dt) * z[:n0]
    r = np.empty(n0 + burn_in)
    r[:n0] = np.expm1(logr)
    w1 = kernel_weights(asset.pdv.kernel1)[::-1]
    w2 = kernel_weights(asset.pdv.kernel2)[::-1]
    c1, c2 = asset.pdv.kernel1.cutoff, asset.pdv.kernel2.cutoff
    b = asset.pdv
    for j in range(n0, n0 + burn_in):
        R1 = np.dot(r[j - 1 - c1:j], w1)
        S = math.sqrt(max(np.dot(r[j - 1 - c2:j] ** 2, w2), 0.0))
        sig = max(b.beta0 + b.beta1 * R1 + b.beta2 * S, asset.sigma_floor)
        r[j] = math.expm1((asset.mu - 0.5 * sig * sig) * dt + sig * math.sqrt(dt) * z[j])
    return r[-length:]


class _Kernels:
    def __init__(self, params: JointModelParams):
        self.list = []
        for prm in (params.asset.pdv, params.a, params.p):
            self.list.append((kernel_weights(prm.kernel1)[::-1].copy(), prm.kernel1.cutoff,
                              kernel_weights(prm.kernel2)[::-1].copy(), prm.kernel2.cutoff))

    def features(self, r, r2, j):
        """``[(R1, Sigma)]`` for sigma, a, p at buffer column ``j`` (last return)."""
        out = []
        for w1, c1, w2, c2 in self.list:
            R1 = r[:, j - c1:j + 1] @ w1
            S = np.sqrt(np.maximum(r2[:, j - c2:j + 1] @ w2, 0.0))
            out.append((R1, S))
        return out


def _sim_chunk(params: JointModelParams, cfg: SimulationConfig, L: np.ndarray, seeds, out, lo, hi):
    P = hi - lo
    H = cfg.horizon
    dt = params.dt
    sq = math.sqrt(dt)
    asset, pa, pp = params.asset, params.a, params.p
    warm = cfg.warmup_returns
    nw = warm.size
    r = np.empty((P, nw + H))
    r[:, :nw] = warm
    r2 = np.empty_like(r)
    r2[:, :nw] = warm * warm
    u = np.stack([np.random.default_rng(s).standard_normal((H, 5)) for s in seeds])  # (P, H, 5)
    kern = _Kernels(params)
    conditional = cfg.mode == "conditional"
    if conditional:
        r[:, nw:] = cfg.price_path
        r2[:, nw:] = cfg.price_path ** 2

    eps_a = np.full(P, float(cfg.eps_a0))
    eps_p = np.full(P, float(cfg.eps_p0))
    rho = np.full(P, params.rho.mu if cfg.rho0 is None else float(cfg.rho0))
    eta = np.full(P, params.eta.mu if cfg.eta0 is None else float(cfg.eta0))
    logS = np.full(P, math.log(cfg.s0))
    floor_events = abs_events = 0

    def form(j):
        nonlocal floor_events, abs_events
        (Rs, Ss), (Ra, Sa), (Rp, Sp) = kern.features(r, r2, j)
        sig = asset.pdv.beta0 + asset.pdv.beta1 * Rs + asset.pdv.beta2 * Ss
        low = sig < asset.sigma_floor
        floor_events += int(low.sum())
        sig = np.where(low, asset.sigma_floor, sig)
        inner = pa.beta0 + pa.beta1 * Ra + (pa.beta2 + eps_a) * Sa
        abs_events += int(np.sum(inner < 0))
        a = np.abs(inner)
        p = np.exp(pp.beta0 + pp.beta1 * Rp + (pp.beta2 + eps_p) * Sp)
        return sig, a, p

    def record(s, sig, a, p):
        out["S"][lo:hi, s] = np.exp(logS)
        out["sigma"][lo:hi, s] = sig
        out["a"][lo:hi, s] = a
        out["p"][lo:hi, s] = p
        out["rho"][lo:hi, s] = rho
        out["eta"][lo:hi, s] = eta
        out["eps_a"][lo:hi, s] = eps_a
        out["eps_p"][lo:hi, s] = eps_p

    j = nw - 1
    sig, a, p = form(j)
    record(0, sig, a, p)
    for s in range(1, H + 1):
        us = u[:, s - 1, :].copy()
        if conditional:
            # condition the other drivers on the realized index shock
            logr = math.log1p(cfg.price_path[s - 1])
            us[:, 0] = (logr - (asset.mu - 0.5 * sig * sig) * dt) / (sig * sq)
        z = us @ L.T
        if conditional:
            lr = np.full(P, math.log1p(cfg.price_path[s - 1]))
        else:
            lr = (asset.mu - 0.5 * sig * sig) * dt + sig * sq * z[:, 0]
            sr = np.expm1(lr)
            r[:, j + 1] = sr
            r2[:, j + 1] = sr * sr
        logS = logS + lr
        j += 1
        eps_a = ou_step_exact(eps_a, params.eps_a, dt, z[:, 1])
        eps_p = ou_step_exact(eps_p, params.eps_p, dt, z[:, 2])
        rho = jacobi_step_full_truncation(rho, params.rho, dt, z[:, 3])
        eta = np.minimum(jacobi_step_full_truncation(eta, params.eta, dt, z[:, 4]), ETA_CAP)
        sig, a, p = form(j)
        record(s, sig, a, p)
    return floor_events, abs_events


def simulate(params: JointModelParams, config: SimulationConfig, dates=None) -> SurfacePathSet:
    """Monte Carlo paths of ``(S, sigma, a, p, rho, eta)``.

    Each path draws its shocks from its own stream spawned from ``config.seed``,
    so results do not depend on the chunking or the number of threads.
    """
    cfg = config
    if not math.isclose(cfg.dt, params.dt, rel_tol=1e-12):
        raise ValueError("simulation dt disagrees with the kernel time step")
    if cfg.warmup_returns.size < params.warmup + 1:
        raise ValueError(f"warm-up history has {cfg.warmup_returns.size} returns; the cut-offs need "
                         f"{params.warmup + 1}")
    if cfg.rho0 is not None and not -1.0 <= cfg.rho0 <= 1.0:
        raise ValueError("rho0 outside [-1, 1]")
    if cfg.eta0 is not None and not 0.0 <= cfg.eta0 <= SQRT2:
        raise ValueError("eta0 outside [0, sqrt 2]")
    corr, _ = repair_correlation(params.correlation)
    L = lower_factor(corr)
    P, H = cfg.n_paths, cfg.horizon
    out = {k: np.empty((P, H + 1)) for k in ("S", "sigma", "a", "p", "rho", "eta", "eps_a", "eps_p")}
    seeds = np.random.SeedSequence(cfg.seed).spawn(P + 1)[1:]
    bounds = [(lo, min(lo + cfg.chunk, P)) for lo in range(0, P, cfg.chunk)]

    def job(b):
        lo, hi = b
        return _sim_chunk(params, cfg, L, seeds[lo:hi], out, lo, hi)

    if cfg.threads == 1 or len(bounds) == 1:
        counts = [job(b) for b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
            counts = list(ex.map(job, bounds))
    floor_events = sum(c[0] for c in counts)
    abs_events = sum(c[1] for c in counts)
    return SurfacePathSet(dt=params.dt, sigma_floor_events=floor_events, abs_a_events=abs_events,
                          dates=None if dates is None else np.asarray(dates),
                          warmup_returns=cfg.warmup_returns.copy(), **out)


def synthetic_panel(params: JointModelParams, n_days: int, seed: int, maturities, axis_values,
                    axis: str = "moneyness", start="2000-01-03", s0: float = 100.0,
                    paths: SurfacePathSet | None = None):
    """A dated panel (prices plus gridded surfaces) generated by one unconditional path.

    Returns ``(panel, paths)``.  The price history starts with the warm-up so
    that every feature is defined on the first grid date.
    """
    from .data import IvsGrid, IvsPanel, PriceSeries

    if paths is None:
        warm = warmup_history(params, seed)
        paths = simulate(params, SimulationConfig(1, n_days - 1, seed, warm, dt=params.dt))
    warm = paths.warmup_returns
    nw = warm.size
    closes = np.concatenate([[s0], s0 * np.cumprod(1.0 + warm)])
    closes = np.concatenate([closes, closes[-1] * paths.S[0, 1:] / paths.S[0, 0]])
    dates = np.busday_offset(np.datetime64(start, "D"), np.arange(closes.size), roll="forward")
    prices = PriceSeries(dates, closes, params.dt)
    T = np.asarray(maturities, float)
    x = np.asarray(axis_values, float)
    vols = paths.implied_vols(T, x, axis, paths=[0])[0]
    ax = np.broadcast_to(x, (T.size, x.size)).copy()
    grids = [IvsGrid(dates[nw + s], T, axis, ax, vols[s]) for s in range(paths.n_steps + 1)]
    return IvsPanel(grids, prices), paths


def initial_state(params: JointModelParams, panel, date=None, daily: PssviParams | None = None) -> dict:
    """Model state observed on ``date`` (default: the panel boundary) as simulation start values.

    The day's surface is fitted with the parsimonious SSVI unless ``daily`` is
    given; ``eps_a`` and ``eps_p`` are backed out of the a and p regressions.
    """
    from .data import to_date

    date = panel.boundary if date is None else to_date(date)
    if date is None:
        raise ValueError("no date given and the panel has no boundary")
    pos = np.flatnonzero(panel.dates == date)
    if not pos.size:
        raise ValueError(f"panel has no surface on {date}")
    grid = panel.grids[int(pos[0])]
    state = calibrate_pssvi_daily(grid)[0] if daily is None else daily
    simple = panel.prices.returns()
    ridx = panel.prices.index_of([date]) - 1
    out = {}
    for name, prm, y in (("eps_a0", params.a, state.a), ("eps_p0", params.p, math.log(max(state.p, 1e-300)))):
        R1, S = prm.features(simple, ridx)
        if S[0] == 0:
            raise ValueError(f"Sigma is zero on {date}: {name} undefined")
        out[name] = float((y - prm.beta0 - prm.beta1 * R1[0]) / S[0] - prm.beta2)
    out["rho0"] = float(np.clip(state.rho, -1.0, 1.0))
    out["eta0"] = float(np.clip(state.eta, 0.0, ETA_CAP))
    return out


def default_threads() -> int:
    return os.cpu_count() or 1


__all__ = [
    "ASSET_CUTOFFS", "AssetFitError", "AssetPdvParams", "ETA_CAP", "FACTORS", "JointFit", "JointFitError",
    "JointModelParams", "NonPositiveVolError", "PRESETS", "PRESET_HYPER", "SIGMA_FLOOR", "SimulationConfig",
    "SurfacePathSet", "asset_loglikelihood", "asset_sigma", "evaluate_surface", "fit_asset", "fit_joint",
    "initial_state",
    "lower_factor", "realized_vol_proxy", "repair_correlation", "simulate", "synthetic_panel",
    "warmup_history",
]
