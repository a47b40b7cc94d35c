"""SSVI total variance surfaces and the parsimonious four-parameter variant."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

HESTON = "heston-like"
POWER_LAW = "power-law"
MODIFIED_POWER_LAW = "modified-power-law"
VARIANTS = (HESTON, POWER_LAW, MODIFIED_POWER_LAW)


@dataclass(frozen=True)
class PhiParam:
    """Curvature function ``phi(theta)`` of an SSVI surface."""

    variant: str
    lam: float | None = None
    eta: float | None = None
    gamma: float | None = None

    def __post_init__(self):
        if self.variant == HESTON:
            if self.lam is None or not self.lam > 0:
                raise ValueError("heston-like phi needs lambda > 0")
        elif self.variant in (POWER_LAW, MODIFIED_POWER_LAW):
            if self.eta is None or not self.eta > 0:
                raise ValueError(f"{self.variant} phi needs eta > 0")
            if self.gamma is None or not 0 < self.gamma < 1:
                raise ValueError(f"{self.variant} phi needs 0 < gamma < 1")
        else:
            raise ValueError(f"unknown phi variant {self.variant!r}")

    @classmethod
    def heston(cls, lam):
        return cls(HESTON, lam=lam)

    @classmethod
    def power_law(cls, eta, gamma):
        return cls(POWER_LAW, eta=eta, gamma=gamma)

    @classmethod
    def modified_power_law(cls, eta, gamma=0.5):
        return cls(MODIFIED_POWER_LAW, eta=eta, gamma=gamma)

    def __call__(self, theta):
        return phi_eval(self, theta)

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


def phi_eval(phi: PhiParam, theta):
    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= 0):
        raise ValueError("phi is only defined for theta > 0")
    if phi.variant == HESTON:
        x = phi.lam * theta
        with np.errstate(divide="ignore", invalid="ignore"):
            big = (1.0 + np.expm1(-x) / x) / x
        # Taylor expansion avoids the cancellation for small lambda * theta
        small = 0.5 - x / 6.0 + x * x / 24.0
        out = np.where(x < 1e-4, small, big)
    elif phi.variant == POWER_LAW:
        out = phi.eta / theta**phi.gamma
    else:
        out = phi.eta / (theta**phi.gamma * (1.0 + theta) ** (1.0 - phi.gamma))
    return out if out.ndim else float(out)


def ssvi_w(k, theta, rho, phi_value):
    """``theta/2 (1 + rho phi k + sqrt((phi k + rho)^2 + 1 - rho^2))``."""
    pk = phi_value * k
    return 0.5 * theta * (1.0 + rho * pk + np.sqrt((pk + rho) ** 2 + 1.0 - rho * rho))


@dataclass(frozen=True)
class SsviSurface:
    """SSVI surface with one ATM total variance per quoted maturity.

    Between quoted maturities ``theta`` is interpolated linearly in ``T``
    (with ``theta(0) = 0``) and held flat beyond the last maturity.
    """

    maturities: tuple
    theta: tuple
    rho: float
    phi: PhiParam

    def __post_init__(self):
        object.__setattr__(self, "maturities", tuple(float(t) for t in self.maturities))
        object.__setattr__(self, "theta", tuple(float(t) for t in self.theta))
        if len(self.maturities) != len(self.theta) or not self.maturities:
            raise ValueError("need one theta per maturity")
        if np.any(np.diff(self.maturities) <= 0):
            raise ValueError("maturities must be strictly increasing")
        if not -1 < self.rho < 1:
            raise ValueError("rho must lie in (-1, 1)")

    def theta_at(self, T):
        Ts = np.concatenate([[0.0], self.maturities])
        th = np.concatenate([[0.0], self.theta])
        return np.interp(T, Ts, th)

    def to_dict(self):
        return {"maturities": list(self.maturities), "theta": list(self.theta), "rho": self.rho,
                "phi": self.phi.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["maturities"]), tuple(d["theta"]), d["rho"], PhiParam(**d["phi"]))


@dataclass(frozen=True)
class PssviParams:
    """Parsimonious SSVI state: ``theta_T = a T^p``, ``phi = eta / sqrt(theta (1 + theta))``."""

    a: float
    p: float
    rho: float
    eta: float

    def __post_init__(self):
        if self.a < 0 or self.p < 0:
            raise ValueError("a and p must be >= 0")
        if not -1 <= self.rho <= 1:
            raise ValueError("rho must lie in [-1, 1]")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")

    @property
    def phi(self) -> PhiParam:
        return PhiParam.modified_power_law(self.eta, 0.5)

    def theta_at(self, T):
        return self.a * np.asarray(T, float) ** self.p

    def arbitrage_margin(self) -> float:
        """``4 - eta^2 (1 + |rho|)``; non-negative means free of static arbitrage."""
        return 4.0 - self.eta**2 * (1.0 + abs(self.rho))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(d["a"], d["p"], d["rho"], d["eta"])


def pssvi_total_variance(a, p, rho, eta, k, T):
    """Vectorized parsimonious SSVI total variance; arguments broadcast.

    Written in terms of ``theta * phi(theta) = eta sqrt(theta / (1 + theta))`` so
    that ``a = 0`` gives ``w = 0`` instead of a 0 * inf product.
    """
    theta = a * np.power(T, p)
    u = eta * np.sqrt(theta / (1.0 + theta))
    uk = u * k
    return 0.5 * (theta + rho * uk + np.sqrt((uk + rho * theta) ** 2 + theta * theta * (1.0 - rho * rho)))


def pssvi_implied_vol(a, p, rho, eta, k, T):
    return np.sqrt(pssvi_total_variance(a, p, rho, eta, k, T) / T)


def total_variance(surface, k, T):
    """Total implied variance ``w(k, T)`` of an :class:`SsviSurface` or :class:`PssviParams`."""
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise ValueError("maturity must be positive")
    if isinstance(surface, PssviParams):
        out = pssvi_total_variance(surface.a, surface.p, surface.rho, surface.eta, k, T)
    else:
        theta = np.asarray(surface.theta_at(T), float)
        k = np.asarray(k, float)
        safe = np.where(theta > 0, theta, 1.0)
        phi = np.asarray(phi_eval(surface.phi, safe))
        out = np.where(theta > 0, ssvi_w(k, theta, surface.rho, phi), 0.0)
    out = np.asarray(out)
    return out if out.ndim else float(out)


def implied_vol(surface, k, T):
    return np.sqrt(np.asarray(total_variance(surface, k, T)) / T)


def atm_skew(surface, T):
    """``d sigma_BS / dk`` at ``k = 0``: ``rho sqrt(theta) phi(theta) / (2 sqrt(T))``."""
    theta = float(surface.theta_at(T))
    if theta <= 0:
        return 0.0
    phi = float(phi_eval(surface.phi, theta))
    return surface.rho * math.sqrt(theta) * phi / (2.0 * math.sqrt(T))
