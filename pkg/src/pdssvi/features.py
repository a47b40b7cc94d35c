"""Time-shifted power-law kernels and the path-dependent features built on them.

A TSPL kernel weights the return observed ``l`` business days ago by
``Z / (l * dt + delta) ** alpha`` for lags ``l = 0..C``.  ``Z`` is chosen so
that the weights times ``dt`` sum to one over the truncated window.

The trend feature is ``R1_t = sum_l w_l r_{t-l}`` and the volatility feature
is ``Sigma_t = sqrt(sum_l w_l r_{t-l}^2)``.  The return stamped ``t`` (the
close-to-close return ending at ``t``) enters at lag 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import lfilter

DT = 1.0 / 252.0
EWMA_SPANS = (10, 20, 120, 250)


@dataclass(frozen=True)
class TsplKernel:
    alpha: float
    delta: float
    cutoff: int
    dt: float = DT

    def __post_init__(self):
        if self.alpha < 0 or self.delta < 0:
            raise ValueError(f"kernel parameters must be >= 0, got alpha={self.alpha}, delta={self.delta}")
        if int(self.cutoff) != self.cutoff or self.cutoff < 1:
            raise ValueError(f"cut-off lag must be an integer >= 1, got {self.cutoff}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def weights(self) -> np.ndarray:
        return kernel_weights(self)

    def with_params(self, alpha: float, delta: float) -> "TsplKernel":
        return TsplKernel(float(alpha), float(delta), self.cutoff, self.dt)


def _log_base(kernel: TsplKernel) -> np.ndarray:
    tau = np.arange(kernel.cutoff + 1) * kernel.dt + kernel.delta
    return np.log(tau)


def kernel_weights(kernel: TsplKernel) -> np.ndarray:
    """Normalized lag weights ``w_0..w_C`` with ``sum(w) * dt == 1``."""
    n = kernel.cutoff + 1
    if kernel.alpha == 0.0:
        return np.full(n, 1.0 / (n * kernel.dt))
    if kernel.delta == 0.0:
        raise ValueError("delta = 0 with alpha > 0 makes the lag-0 weight singular")
    logw = -kernel.alpha * _log_base(kernel)
    # shift before exponentiating so large alphas cannot overflow
    w = np.exp(logw - logw.max())
    return w / (w.sum() * kernel.dt)


def kernel_weights_and_grads(kernel: TsplKernel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weights together with their derivatives in ``alpha`` and ``delta``."""
    w = kernel_weights(kernel)
    dt = kernel.dt
    if kernel.delta == 0.0:
        # only reachable with alpha == 0 (uniform weights)
        g_alpha = np.zeros_like(w)
        g_delta = np.zeros_like(w)
    else:
        tau = np.arange(kernel.cutoff + 1) * dt + kernel.delta
        g_alpha = -np.log(tau)
        g_delta = -kernel.alpha / tau
    # d log(w_l) = g_l - sum_j w_j g_j dt  (normalization)
    dw_alpha = w * (g_alpha - dt * np.dot(w, g_alpha))
    dw_delta = w * (g_delta - dt * np.dot(w, g_delta))
    return w, dw_alpha, dw_delta


def _check_history(n_returns: int, t: int, cutoff: int) -> None:
    if t >= n_returns or t < 0:
        raise IndexError(f"date index {t} outside the return series (length {n_returns})")
    if t < cutoff:
        raise ValueError(
            f"insufficient history at index {t}: need {cutoff} returns before the evaluation date "
            f"(warm-up of {cutoff + 1} returns including lag 0)"
        )


def trend_feature(returns: np.ndarray, kernel: TsplKernel, t: int) -> float:
    """R1 at integer position ``t`` of ``returns``."""
    r = np.asarray(returns, dtype=float)
    _check_history(r.size, t, kernel.cutoff)
    window = r[t - kernel.cutoff : t + 1][::-1]
    return float(np.dot(kernel_weights(kernel), window))


def vol_feature(returns: np.ndarray, kernel: TsplKernel, t: int) -> float:
    """Sigma at integer position ``t`` of ``returns``."""
    r = np.asarray(returns, dtype=float)
    _check_history(r.size, t, kernel.cutoff)
    window = r[t - kernel.cutoff : t + 1][::-1]
    return float(np.sqrt(np.dot(kernel_weights(kernel), window * window)))


def _resolve_index(n: int, cutoff: int, index) -> np.ndarray:
    if index is None:
        return np.arange(cutoff, n)
    idx = np.asarray(index, dtype=np.intp)
    if idx.size and (idx.min() < cutoff or idx.max() >= n):
        bad = idx[(idx < cutoff) | (idx >= n)][0]
        _check_history(n, int(bad), cutoff)
    return idx


def causal_filter(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``y_t = sum_l w_l x_{t-l}`` for every ``t`` (entries with ``t < len(w)-1`` are partial)."""
    return np.convolve(x, w)[: x.size]


def trend_features(returns: np.ndarray, kernel: TsplKernel, index=None) -> np.ndarray:
    """R1 at each position in ``index`` (default: every position with a full window)."""
    r = np.asarray(returns, dtype=float)
    idx = _resolve_index(r.size, kernel.cutoff, index)
    return causal_filter(r, kernel_weights(kernel))[idx]


def vol_features(returns: np.ndarray, kernel: TsplKernel, index=None) -> np.ndarray:
    r = np.asarray(returns, dtype=float)
    idx = _resolve_index(r.size, kernel.cutoff, index)
    s2 = causal_filter(r * r, kernel_weights(kernel))[idx]
    return np.sqrt(np.maximum(s2, 0.0))


def ewma_features(returns: np.ndarray, spans=EWMA_SPANS, squared: bool = False) -> np.ndarray:
    """Exponentially weighted moving averages, one column per span.

    Uses the bias-corrected (``adjust=True``) definition, so a constant series
    maps to itself and an infinite span gives the running mean.  Row ``t``
    includes the return at ``t``, matching the alignment of :func:`trend_features`.
    """
    x = np.asarray(returns, dtype=float)
    if squared:
        x = x * x
    out = np.empty((x.size, len(spans)))
    for j, span in enumerate(spans):
        if span <= 0:
            raise ValueError(f"EWMA spans must be positive, got {span}")
        decay = 1.0 - 2.0 / (span + 1.0)
        num = lfilter([1.0], [1.0, -decay], x)
        den = lfilter([1.0], [1.0, -decay], np.ones_like(x))
        out[:, j] = num / den
    return out


def exponential_lag_weights(spans, cutoff: int) -> np.ndarray:
    """Steady-state EWMA lag weights ``a (1-a)^l``, shape ``(cutoff+1, len(spans))``."""
    lags = np.arange(cutoff + 1)[:, None]
    a = 2.0 / (np.asarray(spans, dtype=float) + 1.0)
    return a * (1.0 - a) ** lags


def fit_tspl_to_curve(curve: np.ndarray, dt: float = DT) -> tuple[float, float]:
    """Least-squares fit of TSPL lag weights to a target lag-weight curve.

    The curve is renormalized to ``sum * dt == 1`` first, so only its shape matters.
    """
    curve = np.asarray(curve, dtype=float)
    total = curve.sum()
    if total == 0.0 or not np.isfinite(total):
        raise ValueError("target lag curve sums to zero; nothing to fit")
    target = curve / (total * dt)
    cutoff = curve.size - 1
    scale = dt * np.sqrt(curve.size)

    def resid(x):
        return (kernel_weights(TsplKernel(x[0], x[1], cutoff, dt)) - target) * scale

    best = None
    for a0, d0 in ((0.5, 0.05), (1.5, 0.02), (3.0, 0.1)):
        sol = least_squares(resid, x0=[a0, d0], bounds=([0.0, 1e-6], [50.0, 10.0]), method="trf",
                            xtol=1e-12, ftol=1e-12, gtol=1e-12)
        if best is None or sol.cost < best.cost:
            best = sol
    return float(best.x[0]), float(best.x[1])


def fit_tspl_to_exponential_mixture(mixture_weights, spans, cutoff: int, dt: float = DT) -> tuple[float, float]:
    """Fit a TSPL kernel to the lag profile of a linear combination of EWMAs."""
    c = np.asarray(mixture_weights, dtype=float)
    if c.shape != (len(spans),):
        raise ValueError("one mixture weight per span is required")
    if not np.any(c != 0.0):
        raise ValueError("all mixture weights are zero")
    curve = exponential_lag_weights(spans, cutoff) @ c
    return fit_tspl_to_curve(curve, dt)
