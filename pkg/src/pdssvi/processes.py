"""Centered Ornstein-Uhlenbeck and Jacobi processes: stepping, estimation, residuals."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SQRT2 = math.sqrt(2.0)
BOUNDARY_EPS = 1e-12


class NonMeanRevertingError(ValueError):
    """Estimated dynamics show no mean reversion (phi >= 1 or kappa <= 0)."""


@dataclass(frozen=True)
class OuParams:
    kappa: float
    gamma: float
    # set by the estimator when the AR coefficient had to be clamped at 0
    boundary: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not (self.kappa > 0 and self.gamma >= 0):
            raise ValueError(f"OU parameters need kappa > 0, gamma >= 0 (got {self.kappa}, {self.gamma})")

    def step_std(self, dt: float) -> float:
        return self.gamma * _ou_scale(self.kappa, dt)

    def stationary_std(self) -> float:
        return self.gamma / math.sqrt(2.0 * self.kappa)


@dataclass(frozen=True)
class JacobiParams:
    kappa: float
    mu: float
    gamma: float
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")
        if not (self.kappa > 0 and self.gamma >= 0):
            raise ValueError(f"Jacobi parameters need kappa > 0 and gamma >= 0 (got {self.kappa}, {self.gamma})")
        if not self.lo <= self.mu <= self.hi:
            raise ValueError(f"mean {self.mu} outside [{self.lo}, {self.hi}]")

    def q(self, x):
        return (np.asarray(x) - self.lo) * (self.hi - np.asarray(x))


def rho_bounds() -> tuple[float, float]:
    return -1.0, 1.0


def eta_bounds() -> tuple[float, float]:
    return 0.0, SQRT2


def _ou_scale(kappa: float, dt: float) -> float:
    x = kappa * dt
    if x < 1e-8:
        return math.sqrt(dt * (1.0 - x))
    return math.sqrt(-math.expm1(-2.0 * x) / (2.0 * kappa))


def ou_step_exact(x, params: OuParams, dt: float, z):
    """Exact transition of ``d eps = -kappa eps dt + gamma dW`` over ``dt``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return np.asarray(x) * math.exp(-params.kappa * dt) + params.gamma * _ou_scale(params.kappa, dt) * np.asarray(z)


def ou_mle(series, dt: float) -> OuParams:
    """Exact-likelihood estimator for a centered OU sampled at a fixed step."""
    x = np.asarray(series, dtype=float)
    if x.size < 100:
        raise ValueError(f"OU estimation needs at least 100 observations, got {x.size}")
    x0, x1 = x[:-1], x[1:]
    ss = np.dot(x0, x0)
    if ss == 0.0:
        raise ValueError("degenerate OU series: all observations are zero")
    phi = np.dot(x1, x0) / ss
    if phi >= 1.0:
        raise NonMeanRevertingError(f"AR(1) coefficient {phi:.6f} >= 1: series is not mean-reverting")
    boundary = False
    phi_min = 1e-12
    if phi < phi_min:
        phi, boundary = phi_min, True
    kappa = -math.log(phi) / dt
    resid = x1 - phi * x0
    var_step = np.dot(resid, resid) / resid.size
    gamma2 = var_step * 2.0 * kappa / (1.0 - phi * phi)
    return OuParams(kappa=kappa, gamma=math.sqrt(gamma2), boundary=boundary)


def ou_residuals(series, params: OuParams, dt: float) -> np.ndarray:
    """Standardized innovations of an OU path under ``params``."""
    x = np.asarray(series, dtype=float)
    scale = params.step_std(dt)
    if scale == 0.0:
        raise ValueError("OU residuals undefined: zero innovation scale (gamma = 0)")
    nu = (x[1:] - x[:-1] * math.exp(-params.kappa * dt)) / scale
    if nu.size and not np.any(nu):
        raise ValueError("OU residuals are identically zero (zero-variance series)")
    return nu


def jacobi_step_full_truncation(x, params: JacobiParams, dt: float, z, clamp: bool = True):
    """One full-truncation Euler step, with the result clamped into ``[lo, hi]``."""
    x = np.asarray(x, dtype=float)
    xc = np.clip(x, params.lo + BOUNDARY_EPS, params.hi - BOUNDARY_EPS)
    q = np.maximum((xc - params.lo) * (params.hi - xc), 0.0)
    nxt = x + params.kappa * (params.mu - x) * dt + params.gamma * np.sqrt(q * dt) * np.asarray(z)
    if clamp:
        nxt = np.clip(nxt, params.lo, params.hi)
    return nxt


def _q_values(x, lo, hi, what="observation"):
    q = (x - lo) * (hi - x)
    if np.any(q <= 0.0):
        k = int(np.flatnonzero(q <= 0.0)[0])
        raise ValueError(f"{what} {k} (value {x[k]!r}) lies on or outside the boundary [{lo}, {hi}]")
    return q


def jacobi_estimate(series, dt: float, lo: float = -1.0, hi: float = 1.0) -> JacobiParams:
    """Closed-form Euler-likelihood estimators for a Jacobi process on ``[lo, hi]``.

    ``kappa`` and ``mu`` come from the weighted (1/Q) regression of increments on
    the level; the dispersion estimator gives ``gamma**2``, so ``gamma`` is its
    square root.
    """
    x = np.asarray(series, dtype=float)
    if x.size < 100:
        raise ValueError(f"Jacobi estimation needs at least 100 observations, got {x.size}")
    x0 = x[:-1]
    dx = np.diff(x)
    q = _q_values(x, lo, hi)[:-1]
    iq = 1.0 / q
    s1 = iq.sum()
    sx = np.dot(x0, iq)
    sxx = np.dot(x0 * x0, iq)
    sd = np.dot(dx, iq)
    sdx = np.dot(dx * x0, iq)
    den = s1 * sxx - sx * sx
    if den <= 0.0:
        raise ValueError("degenerate Jacobi series: no variation in the level")
    kappa = (sd * sx - sdx * s1) / (dt * den)
    if not kappa > 0.0:
        raise NonMeanRevertingError(f"estimated kappa = {kappa:.6g} <= 0")
    mu = np.dot(dx + kappa * x0 * dt, iq) / (kappa * dt * s1)
    n = dx.size
    gamma2 = np.dot((dx - kappa * (mu - x0) * dt) ** 2, iq) / (n * dt)
    mu = float(np.clip(mu, lo, hi))
    return JacobiParams(kappa=float(kappa), mu=mu, gamma=math.sqrt(gamma2), lo=lo, hi=hi)


def jacobi_loglikelihood(series, dt: float, kappa: float, mu: float, gamma: float,
                         lo: float = -1.0, hi: float = 1.0) -> float:
    """Euler-discretized Gaussian log-likelihood of a Jacobi path."""
    x = np.asarray(series, dtype=float)
    x0 = x[:-1]
    q = _q_values(x, lo, hi)[:-1]
    var = gamma * gamma * q * dt
    e = np.diff(x) - kappa * (mu - x0) * dt
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * var) + e * e / var))


def jacobi_residuals(series, params: JacobiParams, dt: float) -> np.ndarray:
    x = np.asarray(series, dtype=float)
    x0 = x[:-1]
    q = params.q(x0)
    if np.any(q <= 0.0) or params.gamma == 0.0:
        k = int(np.flatnonzero(q <= 0.0)[0]) if np.any(q <= 0.0) else 0
        raise ValueError(f"Jacobi residual undefined at step {k}: zero diffusion coefficient")
    eps = (np.diff(x) - params.kappa * (params.mu - x0) * dt) / (params.gamma * np.sqrt(dt * q))
    if eps.size and not np.any(eps):
        raise ValueError("Jacobi residuals are identically zero (zero-variance series)")
    return eps


def simulate_ou(params: OuParams, n: int, dt: float, rng: np.random.Generator, x0: float = 0.0) -> np.ndarray:
    z = rng.standard_normal(n)
    out = np.empty(n + 1)
    out[0] = x0
    phi = math.exp(-params.kappa * dt)
    s = params.step_std(dt)
    for i in range(n):
        out[i + 1] = out[i] * phi + s * z[i]
    return out


def simulate_jacobi(params: JacobiParams, n: int, dt: float, rng: np.random.Generator,
                    x0: float | None = None, clamp: bool = True) -> np.ndarray:
    z = rng.standard_normal(n)
    out = np.empty(n + 1)
    out[0] = params.mu if x0 is None else x0
    for i in range(n):
        out[i + 1] = jacobi_step_full_truncation(out[i], params, dt, z[i], clamp=clamp)
    return out
