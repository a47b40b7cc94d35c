"""Diagnostics for historical and simulated surfaces: PCA of log-variations, envelopes, lag correlations."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import svds
from scipy.special import ndtri

from .pdv import PdvParams


def _sign_fix(vecs: np.ndarray) -> np.ndarray:
    """Flip each column so its first non-negligible loading is positive."""
    out = vecs.copy()
    for j in range(out.shape[1]):
        v = out[:, j]
        nz = np.flatnonzero(np.abs(v) > 1e-12 * np.max(np.abs(v), initial=0.0))
        if nz.size and v[nz[0]] < 0:
            out[:, j] = -v
    return out


@dataclass
class PcaResult:
    eigenvalues: np.ndarray
    ratios: np.ndarray
    eigenvectors: np.ndarray
    total_variance: float
    grid_shape: tuple = ()

    def eigenvector_surface(self, j: int = 0) -> np.ndarray:
        return self.eigenvectors[:, j].reshape(self.grid_shape)


def log_variations(vols) -> np.ndarray:
    """Daily differences of log vols, flattened to ``(n_dates - 1, n_grid)``."""
    v = np.asarray(vols, float)
    if v.ndim < 2 or v.shape[0] < 2:
        raise ValueError("need at least 2 dates")
    v = v.reshape(v.shape[0], -1)
    if np.any(~np.isfinite(v)):
        raise ValueError("grid has missing points")
    if np.any(v <= 0):
        raise ValueError("implied vols must be positive")
    return np.diff(np.log(v), axis=0)


def pca_log_variations(vols, n_components: int | None = None) -> PcaResult:
    """PCA of the sample covariance of daily log-variations of implied vol.

    ``vols`` has shape ``(n_dates, *grid)``.  With ``n_components`` set, only the
    leading components are computed (truncated SVD); ratios are still relative
    to the total variance, so they then sum to less than one.
    """
    v = np.asarray(vols, float)
    grid = v.shape[1:]
    X = log_variations(v)
    X = X - X.mean(axis=0)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least 3 dates for a sample covariance")
    total = float(np.sum(X * X) / (n - 1))
    if n_components is None or n_components >= min(X.shape) - 1:
        vals, vecs = np.linalg.eigh(X.T @ X / (n - 1))
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]
        if n_components is not None:
            vals, vecs = vals[:n_components], vecs[:, :n_components]
    else:
        _, s, vt = svds(X, k=n_components, random_state=0, v0=np.ones(min(X.shape)))
        order = np.argsort(s)[::-1]
        vals = s[order] ** 2 / (n - 1)
        vecs = vt[order].T
    ratios = vals / total if total > 0 else np.zeros_like(vals)
    return PcaResult(vals, ratios, _sign_fix(vecs), total, grid)


@dataclass
class PathPcaResult:
    """Per-path PCA summaries of a simulated path set."""

    ratios: np.ndarray
    eigenvectors: np.ndarray
    grid_shape: tuple

    @property
    def mean_ratios(self) -> np.ndarray:
        return self.ratios.mean(axis=0)

    def average_eigenvector(self, rank: int = 1) -> np.ndarray:
        return align_and_average(self.eigenvectors[:, rank - 1, :]).reshape(self.grid_shape)


def align_and_average(vectors) -> np.ndarray:
    """Average of eigenvectors after sign alignment.

    Each vector is first flipped so that its largest-magnitude loading is
    positive, then flipped again if it points away from the first vector.
    """
    V = np.array(vectors, float)
    if V.ndim != 2 or V.shape[0] < 1:
        raise ValueError("need a (n_paths, n_grid) array of eigenvectors")
    idx = np.argmax(np.abs(V), axis=1)
    V *= np.where(V[np.arange(V.shape[0]), idx] < 0, -1.0, 1.0)[:, None]
    V *= np.where(V @ V[0] < 0, -1.0, 1.0)[:, None]
    return V.mean(axis=0)


def path_pca(paths, maturities, axis_values, axis: str = "moneyness", n_components: int = 4,
             threads: int = 1, paths_index=None) -> PathPcaResult:
    """PCA on each simulated path's gridded surfaces (one path at a time, memory-bounded)."""
    chosen = list(range(paths.n_paths)) if paths_index is None else list(paths_index)
    M, N = len(maturities), len(axis_values)
    if n_components > M * N:
        raise ValueError("rank exceeds grid size")

    def one(i):
        vols = paths.implied_vols(maturities, axis_values, axis, paths=[i])[0]
        r = pca_log_variations(vols, n_components)
        return r.ratios, r.eigenvectors.T

    if threads == 1:
        res = [one(i) for i in chosen]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            res = list(ex.map(one, chosen))
    return PathPcaResult(np.array([r[0] for r in res]), np.array([r[1] for r in res]), (M, N))


def average_eigenvector(paths, maturities, axis_values, rank: int = 1, axis: str = "moneyness",
                        threads: int = 1) -> np.ndarray:
    """Sign-aligned average of the per-path ``rank``-th eigenvector, shaped ``(M, N)``."""
    if paths.n_paths < 2:
        raise ValueError("need at least 2 paths")
    if rank < 1 or rank > len(maturities) * len(axis_values):
        raise ValueError("rank exceeds grid size")
    res = path_pca(paths, maturities, axis_values, axis, n_components=rank, threads=threads)
    return res.average_eigenvector(rank)


# ----------------------------------------------------------------------------- envelopes


@dataclass
class EnvelopeResult:
    quantiles: np.ndarray
    values: np.ndarray
    historical: np.ndarray | None
    exit_frequency: dict = field(default_factory=dict)


def quantile_envelopes(samples, quantiles=(0.005, 0.995), historical=None) -> EnvelopeResult:
    """Per-date empirical quantiles (linear interpolation) of ``samples`` ``(n_paths, n_dates)``.

    Each symmetric pair ``(q, 1 - q)`` in ``quantiles`` is a band; the exit
    frequency of ``historical`` is reported per band.
    """
    x = np.asarray(samples, float)
    if x.ndim == 1:
        x = x[:, None]
    if x.size == 0:
        raise ValueError("no paths")
    q = np.asarray(sorted(quantiles), float)
    if np.any((q <= 0) | (q >= 1)):
        raise ValueError("quantiles must lie in (0, 1)")
    vals = np.quantile(x, q, axis=0, method="linear")
    exits = {}
    h = None
    if historical is not None:
        h = np.asarray(historical, float)
        if h.shape != (x.shape[1],):
            raise ValueError("historical overlay must have one value per date")
        for i, lo in enumerate(q):
            if lo >= 0.5:
                break
            j = int(np.argmin(np.abs(q - (1.0 - lo))))
            if j <= i:
                continue
            band = (float(lo), float(q[j]))
            exits[band] = float(np.mean((h < vals[i]) | (h > vals[j])))
    return EnvelopeResult(q, vals, h, exits)


# ----------------------------------------------------------------------------- lag correlation


@dataclass
class LagCorrelation:
    lags: np.ndarray
    corr: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n: np.ndarray


def lag_correlation(a, b, max_lag: int, confidence: float = 0.95) -> LagCorrelation:
    """Pearson correlation of ``a_t`` with ``b_{t-l}`` for ``l = 0..max_lag`` with Fisher CIs."""
    x = np.asarray(a, float)
    y = np.asarray(b, float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("series must be 1-d and of equal length")
    if x.size <= max_lag + 2:
        raise ValueError("series too short for the requested lags")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("constant input: correlation undefined")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    zq = ndtri(0.5 + 0.5 * confidence)
    lags = np.arange(max_lag + 1)
    corr, lo, hi, ns = (np.empty(lags.size) for _ in range(4))
    for l in lags:
        xa, yb = x[l:], y[: y.size - l]
        if np.ptp(xa) == 0 or np.ptp(yb) == 0:
            raise ValueError(f"constant window at lag {l}")
        c = float(np.clip(np.corrcoef(xa, yb)[0, 1], -1.0, 1.0))
        n = xa.size
        half = zq / math.sqrt(n - 3) if n > 3 else math.inf
        with np.errstate(divide="ignore"):
            z = np.arctanh(c)
        corr[l], lo[l], hi[l], ns[l] = c, math.tanh(z - half), math.tanh(z + half), n
    return LagCorrelation(lags, corr, lo, hi, ns.astype(int))


# ----------------------------------------------------------------------------- density export


def export_joint_density_data(paths, pdv: PdvParams, maturity: float, historical=None) -> list:
    """Rows ``(source, path, step, pdv_prediction, atm_vol)`` for density plots.

    The prediction ``b0 + b1 R1 + b2 Sigma`` uses each path's simple returns
    appended to the shared warm-up.  ``historical`` is an optional
    ``(simple_returns, index, atm_vols)`` triple added as overlay rows.
    """
    warm = np.asarray(paths.warmup_returns, float)
    if warm.size < max(pdv.kernel1.cutoff, pdv.kernel2.cutoff) + 1:
        raise ValueError("warm-up history shorter than the PDV cut-offs")
    atm = paths.atm_vol(maturity)
    sr = np.expm1(paths.log_returns())
    idx = np.arange(warm.size - 1, warm.size + paths.n_steps)
    rows = []
    for i in range(paths.n_paths):
        pred = pdv.predict(np.concatenate([warm, sr[i]]), idx)
        rows.extend(("sim", i, s, float(pred[s]), float(atm[i, s])) for s in range(idx.size))
    if historical is not None:
        r, hidx, vols = historical
        pred = pdv.predict(np.asarray(r, float), hidx)
        rows.extend(("hist", -1, s, float(pred[s]), float(v)) for s, v in enumerate(np.asarray(vols, float)))
    return rows


# ----------------------------------------------------------------------------- CSV writers


def _write(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


def write_pca_csv(path, result: PcaResult) -> None:
    rows = [(j + 1, float(v), float(r)) for j, (v, r) in enumerate(zip(result.eigenvalues, result.ratios))]
    _write(path, ["component", "eigenvalue", "explained_ratio"], rows)


def write_eigenvector_csv(path, surface, maturities, axis_values) -> None:
    s = np.asarray(surface, float)
    rows = [(round(float(t) * 12.0, 10), float(x), float(s[i, j]))
            for i, t in enumerate(maturities) for j, x in enumerate(axis_values)]
    _write(path, ["maturity_months", "axis_value", "loading"], rows)


def write_envelope_csv(path, env: EnvelopeResult, labels=None) -> None:
    n = env.values.shape[1]
    labels = list(range(n)) if labels is None else list(labels)
    header = ["date"] + [f"q{q:g}" for q in env.quantiles] + (["historical"] if env.historical is not None else [])
    rows = []
    for d in range(n):
        row = [labels[d]] + [float(v) for v in env.values[:, d]]
        if env.historical is not None:
            row.append(float(env.historical[d]))
        rows.append(row)
    _write(path, header, rows)


def write_lag_correlation_csv(path, lc: LagCorrelation) -> None:
    rows = [(int(l), float(c), float(lo), float(hi), int(n))
            for l, c, lo, hi, n in zip(lc.lags, lc.corr, lc.lower, lc.upper, lc.n)]
    _write(path, ["lag", "corr", "lower", "upper", "n"], rows)


def write_density_csv(path, rows) -> None:
    _write(path, ["source", "path", "step", "pdv_prediction", "atm_vol"], rows)


__all__ = [
    "EnvelopeResult", "LagCorrelation", "PathPcaResult", "PcaResult", "align_and_average", "average_eigenvector",
    "export_joint_density_data", "lag_correlation", "log_variations", "path_pca", "pca_log_variations",
    "quantile_envelopes", "write_density_csv", "write_eigenvector_csv", "write_envelope_csv",
    "write_lag_correlation_csv", "write_pca_csv",
]
