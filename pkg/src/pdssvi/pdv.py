"""Path-dependent volatility regression ``target = b0 + b1 R1 + b2 Sigma``: calibration, scores, cross-validation.

Target observations are addressed by their position in the simple-return
series: ``index[j]`` is the position of the most recent return (lag 0) used
for observation ``j``.  When ``index`` is omitted the target is aligned with
the last ``len(target)`` returns.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import least_squares

from .features import (DT, EWMA_SPANS, TsplKernel, ewma_features, fit_tspl_to_exponential_mixture,
                       kernel_weights, kernel_weights_and_grads)

RIDGE_PENALTY = 1e-4
ALPHA_BOUNDS = (0.0, 50.0)
DELTA_BOUNDS = (1e-6, 10.0)
FALLBACK_KERNEL = (1.0, 0.05)
LSQ_TOL = 1e-10
LSQ_MAX_NFEV = 500


class DegenerateTargetError(ValueError):
    """The target series is constant, so R2 (and the regression) is undefined."""


class PdvConvergenceError(RuntimeError):
    def __init__(self, message, best_iterate=None, grad_norm=None):
        super().__init__(message)
        self.best_iterate = best_iterate
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class PdvHyperParams:
    c_r1: int = 1000
    c_sigma: int = 1000
    lam: float = 0.0

    def __post_init__(self):
        if int(self.c_r1) != self.c_r1 or int(self.c_sigma) != self.c_sigma or min(self.c_r1, self.c_sigma) < 1:
            raise ValueError("cut-off lags must be integers >= 1")
        if self.lam < 0:
            raise ValueError("penalty lambda must be >= 0")

    @property
    def warmup(self) -> int:
        return max(self.c_r1, self.c_sigma)


@dataclass(frozen=True)
class PdvParams:
    beta0: float
    beta1: float
    beta2: float
    kernel1: TsplKernel
    kernel2: TsplKernel

    def as_vector(self) -> np.ndarray:
        k1, k2 = self.kernel1, self.kernel2
        return np.array([k1.alpha, k1.delta, k2.alpha, k2.delta, self.beta0, self.beta1, self.beta2])

    @classmethod
    def from_vector(cls, x, c_r1: int, c_sigma: int, dt: float = DT) -> "PdvParams":
        return cls(float(x[4]), float(x[5]), float(x[6]), TsplKernel(float(x[0]), float(x[1]), c_r1, dt),
                   TsplKernel(float(x[2]), float(x[3]), c_sigma, dt))

    def features(self, returns, index=None):
        """``(R1, Sigma)`` at the positions ``index`` of ``returns``."""
        r = np.asarray(returns, float)
        idx = _default_index(r.size, index)
        _check_warmup(idx, max(self.kernel1.cutoff, self.kernel2.cutoff))
        L1 = _lag_matrix(r, idx, self.kernel1.cutoff)
        L2 = _lag_matrix(r * r, idx, self.kernel2.cutoff)
        R1 = L1 @ kernel_weights(self.kernel1)
        S = np.sqrt(np.maximum(L2 @ kernel_weights(self.kernel2), 0.0))
        return R1, S

    def predict(self, returns, index=None) -> np.ndarray:
        R1, S = self.features(returns, index)
        return self.beta0 + self.beta1 * R1 + self.beta2 * S

    def to_dict(self) -> dict:
        return {"beta0": self.beta0, "beta1": self.beta1, "beta2": self.beta2,
                "alpha1": self.kernel1.alpha, "delta1": self.kernel1.delta, "c_r1": self.kernel1.cutoff,
                "alpha2": self.kernel2.alpha, "delta2": self.kernel2.delta, "c_sigma": self.kernel2.cutoff,
                "dt": self.kernel1.dt}

    @classmethod
    def from_dict(cls, d) -> "PdvParams":
        dt = d.get("dt", DT)
        return cls(d["beta0"], d["beta1"], d["beta2"], TsplKernel(d["alpha1"], d["delta1"], int(d["c_r1"]), dt),
                   TsplKernel(d["alpha2"], d["delta2"], int(d["c_sigma"]), dt))


@dataclass
class CalibrationReport:
    params: PdvParams
    hyper: PdvHyperParams
    train_r2: float
    test_r2: float | None
    d_ratio: float | None
    residuals: np.ndarray
    residual_acf: dict = field(default_factory=dict)
    initial_cost: float = math.nan
    final_cost: float = math.nan
    nfev: int = 0
    grad_norm: float = math.nan
    initial_params: PdvParams | None = None

    def to_dict(self, include_residuals: bool = False) -> dict:
        out = {"params": self.params.to_dict(), "hyper": asdict(self.hyper), "train_r2": self.train_r2,
               "test_r2": self.test_r2, "d_ratio": self.d_ratio,
               "residual_acf": {str(k): v for k, v in self.residual_acf.items()},
               "initial_cost": self.initial_cost, "final_cost": self.final_cost, "nfev": self.nfev,
               "grad_norm": self.grad_norm}
        if include_residuals:
            out["residuals"] = [float(x) for x in self.residuals]
        return out

    def to_json(self, path, include_residuals: bool = False) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(include_residuals), fh, indent=2, sort_keys=True)


# ----------------------------------------------------------------------------- scores


def r2_score(observed, predicted) -> float:
    """Coefficient of determination ``1 - SSE / SST``."""
    y = np.asarray(observed, float)
    f = np.asarray(predicted, float)
    if y.shape != f.shape or y.size == 0:
        raise ValueError("observed and predicted must be non-empty and of equal length")
    sst = np.sum((y - y.mean()) ** 2)
    if sst == 0.0:
        raise DegenerateTargetError("R2 undefined: observed series is constant")
    return float(1.0 - np.sum((y - f) ** 2) / sst)


def d_ratio(observed, predicted) -> float:
    """Signed over absolute residual sums; +1 means the model always under-predicts."""
    e = np.asarray(observed, float) - np.asarray(predicted, float)
    denom = np.sum(np.abs(e))
    if denom == 0.0:
        raise ValueError("D-ratio undefined: all residuals are zero")
    return float(np.sum(e) / denom)


def residual_autocorrelation(residuals, lags=(1,)) -> dict:
    """Pearson correlation between ``e_t`` and ``e_{t-l}`` for each lag ``l``."""
    e = np.asarray(residuals, float)
    lags = [int(x) for x in np.atleast_1d(lags)]
    if max(lags) >= e.size - 1:
        raise ValueError(f"series of length {e.size} too short for lag {max(lags)}")
    if np.ptp(e) == 0.0:
        raise ValueError("autocorrelation undefined for a constant series")
    out = {}
    for lag in lags:
        if lag == 0:
            out[lag] = 1.0
            continue
        a, b = e[lag:], e[:-lag]
        if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
            raise ValueError(f"autocorrelation undefined at lag {lag}: constant sub-series")
        out[lag] = float(np.corrcoef(a, b)[0, 1])
    return out


# ----------------------------------------------------------------------------- helpers


def _default_index(n_returns: int, index, n_target: int | None = None) -> np.ndarray:
    if index is None:
        if n_target is None:
            n_target = n_returns
        if n_target > n_returns:
            raise ValueError("target is longer than the return series")
        return np.arange(n_returns - n_target, n_returns)
    idx = np.asarray(index, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= n_returns):
        raise IndexError("target index outside the return series")
    return idx


def _check_warmup(idx, warmup: int) -> None:
    if idx.size and idx.min() < warmup:
        raise ValueError(
            f"insufficient warm-up: the first target uses return position {int(idx.min())} but the cut-off "
            f"needs {warmup} earlier returns ({warmup + 1} including lag 0)"
        )


def _lag_matrix(x: np.ndarray, idx: np.ndarray, cutoff: int) -> np.ndarray:
    """Rows ``[x[t], x[t-1], ..., x[t-C]]`` for each ``t`` in ``idx``."""
    win = sliding_window_view(x, cutoff + 1)
    return win[idx - cutoff][:, ::-1]


def _ridge(X: np.ndarray, y: np.ndarray, penalty: float) -> np.ndarray:
    """Ridge coefficients (original scale) on standardized columns with a free intercept."""
    mu, sd = X.mean(axis=0), X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = (X - mu) / sd
    yc = y - y.mean()
    n = Z.shape[0]
    A = Z.T @ Z / n + penalty * np.eye(Z.shape[1])
    b = np.linalg.solve(A, Z.T @ yc / n)
    return b / sd


def _initial_kernel(mix, cutoff, dt):
    try:
        a, d = fit_tspl_to_exponential_mixture(mix, EWMA_SPANS, cutoff, dt)
    except ValueError:
        a, d = FALLBACK_KERNEL
    return a, max(d, DELTA_BOUNDS[0])


def ols_betas(target, R1, S) -> np.ndarray:
    X = np.column_stack([np.ones_like(R1), R1, S])
    beta, *_ = np.linalg.lstsq(X, target, rcond=None)
    return beta


class _Problem:
    """Residuals and Jacobian of the penalized 7-parameter least-squares problem."""

    def __init__(self, target, returns, idx, hyper, dt):
        self.y = target
        self.L1 = _lag_matrix(returns, idx, hyper.c_r1)
        self.L2 = _lag_matrix(returns * returns, idx, hyper.c_sigma)
        self.hyper = hyper
        self.dt = dt
        self.sqrt_lam = math.sqrt(hyper.lam)

    def features(self, x, grads=False):
        k1 = TsplKernel(x[0], x[1], self.hyper.c_r1, self.dt)
        k2 = TsplKernel(x[2], x[3], self.hyper.c_sigma, self.dt)
        if not grads:
            R1 = self.L1 @ kernel_weights(k1)
            S = np.sqrt(np.maximum(self.L2 @ kernel_weights(k2), 0.0))
            return R1, S
        w1, dw1a, dw1d = kernel_weights_and_grads(k1)
        w2, dw2a, dw2d = kernel_weights_and_grads(k2)
        R1 = self.L1 @ w1
        S2 = np.maximum(self.L2 @ w2, 0.0)
        S = np.sqrt(S2)
        inv = 0.5 / np.maximum(S, 1e-300)
        return R1, S, self.L1 @ dw1a, self.L1 @ dw1d, (self.L2 @ dw2a) * inv, (self.L2 @ dw2d) * inv

    def residuals(self, x):
        R1, S = self.features(x)
        fit = self.y - x[4] - x[5] * R1 - x[6] * S
        if self.sqrt_lam > 0:
            fit = np.concatenate([fit, self.sqrt_lam * x[:4]])
        return fit

    def jacobian(self, x):
        R1, S, dR_a, dR_d, dS_a, dS_d = self.features(x, grads=True)
        n = self.y.size
        J = np.empty((n, 7))
        J[:, 0] = -x[5] * dR_a
        J[:, 1] = -x[5] * dR_d
        J[:, 2] = -x[6] * dS_a
        J[:, 3] = -x[6] * dS_d
        J[:, 4] = -1.0
        J[:, 5] = -R1
        J[:, 6] = -S
        if self.sqrt_lam > 0:
            P = np.zeros((4, 7))
            P[np.arange(4), np.arange(4)] = self.sqrt_lam
            J = np.vstack([J, P])
        return J

    def cost(self, x):
        r = self.residuals(x)
        return float(r @ r)


def initial_guess(target, returns, idx, hyper: PdvHyperParams, dt: float = DT) -> np.ndarray:
    """Stages 1 and 2: EWMA ridge regressions, TSPL fits, then OLS betas."""
    y = np.asarray(target, float)
    E1 = ewma_features(returns, EWMA_SPANS)[idx]
    E2 = ewma_features(returns, EWMA_SPANS, squared=True)[idx]
    a1, d1 = _initial_kernel(_ridge(E1, y, RIDGE_PENALTY), hyper.c_r1, dt)
    a2, d2 = _initial_kernel(_ridge(E2, y * y, RIDGE_PENALTY), hyper.c_sigma, dt)
    x = np.array([a1, d1, a2, d2, 0.0, 0.0, 0.0])
    prob = _Problem(y, returns, idx, hyper, dt)
    R1, S = prob.features(x)
    x[4:] = ols_betas(y, R1, S)
    return x


def calibrate(target, returns, hyper: PdvHyperParams = PdvHyperParams(), index=None, dt: float = DT,
              test_target=None, test_index=None, acf_lags=(1,), init: PdvParams | None = None,
              freeze_kernels: bool = False) -> CalibrationReport:
    """Three-stage calibration of the PDV regression.

    Parameters
    ----------
    target : array
        Observed series (e.g. an ATM implied vol or a transformed SSVI parameter).
    returns : array
        Simple returns of the index, including the warm-up history.
    hyper : PdvHyperParams
        Cut-off lags and L2 penalty on the kernel parameters.
    index : array of int, optional
        Return position of each target observation.
    test_target, test_index : optional
        Held-out observations scored with the fitted parameters.
    init : PdvParams, optional
        Skip stages 1-2 and start stage 3 from these parameters.
    freeze_kernels : bool
        Keep the kernel parameters at their initial values and fit the betas only.
    """
    y = np.asarray(target, float)
    r = np.asarray(returns, float)
    idx = _default_index(r.size, index, y.size)
    if idx.shape != y.shape:
        raise ValueError("target and index must have the same length")
    if not np.all(np.isfinite(y)):
        raise ValueError("target contains non-finite values")
    if y.size < 3:
        raise ValueError("need at least 3 target observations")
    if np.ptp(y) == 0.0:
        raise DegenerateTargetError("target series is constant: R2 undefined")
    _check_warmup(idx, hyper.warmup)

    if init is not None:
        x0 = init.as_vector()
        x0[1] = max(x0[1], DELTA_BOUNDS[0])
        x0[3] = max(x0[3], DELTA_BOUNDS[0])
    else:
        x0 = initial_guess(y, r, idx, hyper, dt)
    prob = _Problem(y, r, idx, hyper, dt)
    cost0 = prob.cost(x0)

    if freeze_kernels:
        R1, S = prob.features(x0)
        x = x0.copy()
        x[4:] = ols_betas(y, R1, S)
        nfev, gnorm = 1, 0.0
    else:
        lo = np.array([ALPHA_BOUNDS[0], DELTA_BOUNDS[0], ALPHA_BOUNDS[0], DELTA_BOUNDS[0], -np.inf, -np.inf, -np.inf])
        hi = np.array([ALPHA_BOUNDS[1], DELTA_BOUNDS[1], ALPHA_BOUNDS[1], DELTA_BOUNDS[1], np.inf, np.inf, np.inf])
        x0 = np.clip(x0, lo, hi)
        with np.errstate(over="ignore", invalid="ignore"):
            sol = least_squares(prob.residuals, x0, jac=prob.jacobian, bounds=(lo, hi), method="trf",
                                xtol=LSQ_TOL, ftol=LSQ_TOL, gtol=LSQ_TOL, max_nfev=LSQ_MAX_NFEV, x_scale="jac")
        x, nfev = sol.x, sol.nfev
        gnorm = float(np.linalg.norm(sol.grad))
        if sol.status <= 0 or not np.all(np.isfinite(x)):
            raise PdvConvergenceError(f"stage-3 least squares did not converge: {sol.message}",
                                      best_iterate=PdvParams.from_vector(x, hyper.c_r1, hyper.c_sigma, dt),
                                      grad_norm=gnorm)
    cost = prob.cost(x)
    params = PdvParams.from_vector(x, hyper.c_r1, hyper.c_sigma, dt)
    pred = params.predict(r, idx)
    resid = y - pred
    train_r2 = r2_score(y, pred)
    test_r2 = dr = None
    if test_target is not None:
        yt = np.asarray(test_target, float)
        it = _default_index(r.size, test_index, yt.size)
        _check_warmup(it, hyper.warmup)
        pt = params.predict(r, it)
        test_r2 = r2_score(yt, pt)
        dr = d_ratio(yt, pt)
    else:
        dr = d_ratio(y, pred) if np.any(resid != 0) else 0.0
    try:
        acf = residual_autocorrelation(resid, acf_lags) if acf_lags else {}
    except ValueError:
        acf = {}
    return CalibrationReport(params, hyper, train_r2, test_r2, dr, resid, acf, cost0, cost, nfev, gnorm,
                             PdvParams.from_vector(x0, hyper.c_r1, hyper.c_sigma, dt))


# ----------------------------------------------------------------------------- cross-validation


@dataclass
class CrossValidationResult:
    hypers: list
    fold_scores: np.ndarray
    mean_scores: np.ndarray
    smoothed_scores: np.ndarray
    best: PdvHyperParams
    best_raw: PdvHyperParams

    def rows(self) -> list:
        return [{"c_r1": h.c_r1, "c_sigma": h.c_sigma, "lam": h.lam, "mean_r2": float(m), "smoothed_r2": float(s)}
                for h, m, s in zip(self.hypers, self.mean_scores, self.smoothed_scores)]


def fold_slices(n: int, folds: int) -> list:
    """Adjacent folds of equal size; the last one absorbs the remainder."""
    if folds < 2:
        raise ValueError("need at least 2 folds")
    size = n // folds
    if size < 3:
        raise ValueError(f"{n} observations cannot be split into {folds} folds of at least 3")
    return [slice(i * size, (i + 1) * size if i < folds - 1 else n) for i in range(folds)]


def neighbour_smoothed(hypers, scores) -> np.ndarray:
    """Average each score with its grid neighbours in ``C_R1`` and ``lambda`` at fixed ``C_Sigma``."""
    c_values = sorted({h.c_r1 for h in hypers})
    l_values = sorted({h.lam for h in hypers})
    lookup = {}
    for h, s in zip(hypers, scores):
        lookup.setdefault((h.c_r1, h.c_sigma, h.lam), s)
    out = np.empty(len(hypers))
    for j, h in enumerate(hypers):
        vals = [scores[j]]
        ci, li = c_values.index(h.c_r1), l_values.index(h.lam)
        cand = []
        for di in (-1, 1):
            if 0 <= ci + di < len(c_values):
                cand.append((c_values[ci + di], h.c_sigma, h.lam))
            if 0 <= li + di < len(l_values):
                cand.append((h.c_r1, h.c_sigma, l_values[li + di]))
        vals += [lookup[c] for c in cand if c in lookup]
        out[j] = float(np.mean(vals))
    return out


def blocked_cross_validate(target, returns, grid, folds: int = 10, index=None, dt: float = DT,
                           workers: int = 1) -> CrossValidationResult:
    """Blocked k-fold cross-validation of hyperparameter triples (mean out-of-fold R2)."""
    y = np.asarray(target, float)
    r = np.asarray(returns, float)
    idx = _default_index(r.size, index, y.size)
    hypers = list(grid)
    if not hypers:
        raise ValueError("empty hyperparameter grid")
    slices = fold_slices(y.size, folds)
    for h in hypers:
        _check_warmup(idx, h.warmup)

    def score(job):
        h, sl = job
        mask = np.ones(y.size, bool)
        mask[sl] = False
        rep = calibrate(y[mask], r, h, index=idx[mask], dt=dt, acf_lags=())
        return r2_score(y[sl], rep.params.predict(r, idx[sl]))

    jobs = [(h, sl) for h in hypers for sl in slices]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            flat = list(ex.map(score, jobs))
    else:
        flat = [score(j) for j in jobs]
    fold_scores = np.array(flat).reshape(len(hypers), len(slices))
    mean_scores = fold_scores.mean(axis=1)
    smoothed = neighbour_smoothed(hypers, mean_scores)
    return CrossValidationResult(hypers, fold_scores, mean_scores, smoothed, hypers[int(np.argmax(smoothed))],
                                 hypers[int(np.argmax(mean_scores))])


def hyper_grid(c_values, lam_values, c_sigma_values=None) -> list:
    c_sigma_values = c_values if c_sigma_values is None else c_sigma_values
    return [PdvHyperParams(int(c1), int(cs), float(lam)) for c1 in c_values for cs in c_sigma_values
            for lam in lam_values]
