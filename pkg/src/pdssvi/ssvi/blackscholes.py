"""Forward-normalized Black-Scholes helpers (zero rates, zero dividends).

Prices are in units of the forward and strikes are forward moneyness
``m = K / F`` (log-strike ``k = ln m``).
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri

M_BRACKET = (1e-3, 1e3)


class NoRootError(ValueError):
    pass


def d1(m, T, sigma):
    s = np.asarray(sigma) * np.sqrt(T)
    return (-np.log(m) + 0.5 * s * s) / s


def bs_call_price(m, T, sigma):
    """Undiscounted call price per unit forward: ``N(d1) - m N(d1 - sigma sqrt(T))``."""
    m, T, sigma = np.broadcast_arrays(np.asarray(m, float), np.asarray(T, float), np.asarray(sigma, float))
    s = sigma * np.sqrt(T)
    with np.errstate(divide="ignore", invalid="ignore"):
        dd = (-np.log(m) + 0.5 * s * s) / s
        price = ndtr(dd) - m * ndtr(dd - s)
    price = np.where(s > 0, price, np.maximum(1.0 - m, 0.0))
    return price if price.ndim else float(price)


def bs_vega(m, T, sigma):
    s = np.asarray(sigma) * np.sqrt(T)
    dd = (-np.log(m) + 0.5 * s * s) / s
    return np.exp(-0.5 * dd * dd) / np.sqrt(2.0 * np.pi) * np.sqrt(T)


def bs_delta(m, T, sigma, is_call: bool = True):
    """``eps * N(eps * d1)`` with ``eps = +1`` for calls and ``-1`` for puts."""
    eps = 1.0 if is_call else -1.0
    out = eps * ndtr(eps * d1(m, T, sigma))
    return out if np.ndim(out) else float(out)


def moneyness_from_delta_fixed_vol(delta, T, sigma):
    """Closed-form inversion of the delta when the vol does not depend on the strike."""
    delta = np.asarray(delta, float)
    is_call = delta > 0
    dd = np.where(is_call, ndtri(np.where(is_call, delta, 0.5)), -ndtri(np.where(is_call, 0.5, -delta)))
    s = np.asarray(sigma) * np.sqrt(T)
    return np.exp(-dd * s + 0.5 * s * s)


def delta_to_moneyness(target_delta, T, vol, tol: float = 1e-10, max_iter: int = 100):
    """Solve ``bs_delta(m, T, vol(ln m, T)) = target_delta`` for ``m``.

    ``vol`` is either a number (flat smile) or a vectorized callable ``vol(k, T)``.
    Positive targets are call deltas, negative ones put deltas.  The solve runs
    a Newton iteration in log-moneyness, falling back to bisection whenever a
    step leaves the current bracket ``[1e-3, 1e3]``.
    """
    target = np.asarray(target_delta, float)
    T = np.asarray(T, float)
    target, T = np.broadcast_arrays(target, T)
    if np.any((target <= -1) | (target >= 1) | (target == 0)):
        raise ValueError("target deltas must lie in (0, 1) for calls or (-1, 0) for puts")
    if callable(vol):
        vol_fn = vol
    else:
        flat = float(vol)
        vol_fn = lambda k, t: np.full(np.broadcast(k, t).shape, flat)  # noqa: E731

    is_call = target > 0

    def f(x):
        sig = vol_fn(x, T)
        s = sig * np.sqrt(T)
        dd = (-x + 0.5 * s * s) / s
        return np.where(is_call, ndtr(dd), -ndtr(-dd)) - target

    lo = np.full(target.shape, np.log(M_BRACKET[0]))
    hi = np.full(target.shape, np.log(M_BRACKET[1]))
    f_lo, f_hi = f(lo), f(hi)
    # delta is decreasing in the strike for a sane smile
    if np.any(f_lo * f_hi > 0):
        raise NoRootError("no moneyness in [1e-3, 1e3] reproduces the target delta")

    x = np.zeros(target.shape)
    fx = f(x)
    h = 1e-6
    for _ in range(max_iter):
        done = np.abs(fx) < tol
        if np.all(done):
            break
        # keep the bracket [lo, hi] around the root (f decreasing)
        pos = fx > 0
        lo = np.where(pos & ~done, x, lo)
        hi = np.where(~pos & ~done, x, hi)
        deriv = (f(x + h) - f(x - h)) / (2 * h)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = x - fx / deriv
        bad = ~np.isfinite(step) | (step <= lo) | (step >= hi)
        x_new = np.where(bad, 0.5 * (lo + hi), step)
        x = np.where(done, x, x_new)
        fx = f(x)
    else:
        if not np.all(np.abs(fx) < tol):
            raise NoRootError("delta inversion did not converge")
    m = np.exp(x)
    return m if m.ndim else float(m)


def implied_vol_from_price(price: float, m: float, T: float) -> float:
    """Black-Scholes implied vol of a forward-normalized call price."""
    lower = max(1.0 - m, 0.0)
    if not (lower < price < 1.0):
        raise ValueError(f"price {price} outside the no-arbitrage band ({lower}, 1)")

    def g(s):
        return bs_call_price(m, T, s) - price

    hi = 1.0
    while g(hi) < 0:
        hi *= 2.0
        if hi > 1e4:
            raise NoRootError("implied vol bracket search failed")
    lo = 1e-4
    while g(lo) > 0:
        lo *= 0.1
        if lo < 1e-300:
            raise NoRootError("implied vol bracket search failed")
    return brentq(g, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
