"""Index price series, implied-volatility grids and panels: I/O, validation, filtering, splits."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .features import DT

AXIS_ALIASES = {"moneyness": "moneyness", "forward-moneyness": "moneyness", "delta": "delta", "bs-delta": "delta"}


class DataError(ValueError):
    """Invalid input data (bad values, inconsistent structure)."""


class ParseError(DataError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path, self.line = path, line


def to_date(value) -> np.datetime64:
    return np.datetime64(value, "D")


def normalize_axis(axis: str) -> str:
    try:
        return AXIS_ALIASES[axis]
    except KeyError:
        raise DataError(f"unknown axis kind {axis!r}; expected one of {sorted(AXIS_ALIASES)}") from None


@dataclass(frozen=True)
class PriceSeries:
    """Daily index closes on strictly increasing dates."""

    dates: np.ndarray
    closes: np.ndarray
    dt: float = DT

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        closes = np.asarray(self.closes, dtype=float)
        if dates.shape != closes.shape or dates.ndim != 1:
            raise DataError("dates and closes must be 1-d arrays of equal length")
        if dates.size and np.any(np.diff(dates) <= np.timedelta64(0, "D")):
            k = int(np.flatnonzero(np.diff(dates) <= np.timedelta64(0, "D"))[0]) + 1
            raise DataError(f"dates must be strictly increasing (duplicate or out of order at {dates[k]})")
        if np.any(~(closes > 0)):
            k = int(np.flatnonzero(~(closes > 0))[0])
            raise DataError(f"non-positive close {closes[k]} on {dates[k]}")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "closes", closes)

    def __len__(self):
        return self.closes.size

    def returns(self) -> np.ndarray:
        """Simple returns ``r_i = S_i / S_{i-1} - 1``, aligned with ``dates[1:]``."""
        return self.closes[1:] / self.closes[:-1] - 1.0

    def log_returns(self) -> np.ndarray:
        return np.diff(np.log(self.closes))

    def index_of(self, dates) -> np.ndarray:
        """Positions of ``dates`` in the series; a missing date is an error."""
        d = np.atleast_1d(np.asarray(dates, dtype="datetime64[D]"))
        pos = np.searchsorted(self.dates, d)
        bad = (pos >= self.dates.size) | (self.dates[np.minimum(pos, self.dates.size - 1)] != d)
        if np.any(bad):
            raise DataError(f"date {d[np.flatnonzero(bad)[0]]} is missing from the price series")
        return pos

    def until(self, date) -> "PriceSeries":
        keep = self.dates <= to_date(date)
        return PriceSeries(self.dates[keep], self.closes[keep], self.dt)


@dataclass(frozen=True)
class IvsGrid:
    """One day's implied vols on a (maturity x axis value) grid."""

    date: np.datetime64
    maturities: np.ndarray
    axis: str
    axis_values: np.ndarray
    vols: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "date", to_date(self.date))
        axis = normalize_axis(self.axis)
        T = np.asarray(self.maturities, float)
        X = np.atleast_2d(np.asarray(self.axis_values, float))
        V = np.atleast_2d(np.asarray(self.vols, float))
        if X.shape != V.shape or X.shape[0] != T.size:
            raise DataError(f"{self.date}: axis values {X.shape} and vols {V.shape} must be (n_maturities, n_points)")
        if np.any(np.diff(T) <= 0) or np.any(T <= 0):
            raise DataError(f"{self.date}: maturities must be positive and strictly increasing")
        if np.any(~(V > 0)):
            raise DataError(f"{self.date}: implied vols must be strictly positive")
        if axis == "moneyness":
            if np.any(X <= 0):
                raise DataError(f"{self.date}: forward moneyness must be positive")
            if np.any(np.diff(X, axis=1) <= 0):
                raise DataError(f"{self.date}: moneyness values must be strictly increasing per maturity")
        else:
            if np.any((X <= -1) | (X >= 1) | (X == 0)):
                raise DataError(f"{self.date}: deltas must lie in (-1, 0) or (0, 1)")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "maturities", T)
        object.__setattr__(self, "axis_values", X)
        object.__setattr__(self, "vols", V)

    @property
    def shape(self):
        return self.vols.shape

    def total_variance(self) -> np.ndarray:
        return self.vols**2 * self.maturities[:, None]

    def to_moneyness(self) -> "IvsGrid":
        """Same quotes on the forward-moneyness axis (delta grids are inverted per quote)."""
        if self.axis == "moneyness":
            return self
        from .ssvi.calibration import grid_to_moneyness

        _, ms, vs = grid_to_moneyness(self)
        return IvsGrid(self.date, self.maturities, "moneyness", np.array(ms), np.array(vs))

    def atm_vols(self) -> np.ndarray:
        """ATM-forward vol per maturity, linearly interpolated in log-moneyness."""
        g = self.to_moneyness()
        k = np.log(g.axis_values)
        return np.array([np.interp(0.0, k[i], g.vols[i]) for i in range(g.maturities.size)])


@dataclass
class IvsPanel:
    """Dated IVS grids sharing one maturity set, plus the index price history."""

    grids: list
    prices: PriceSeries
    boundary: np.datetime64 | None = None
    removed_dates: list = field(default_factory=list)

    def __post_init__(self):
        self.grids = sorted(self.grids, key=lambda g: g.date)
        if self.grids:
            T0 = self.grids[0].maturities
            for g in self.grids[1:]:
                if g.maturities.shape != T0.shape or not np.allclose(g.maturities, T0, rtol=0, atol=1e-12):
                    raise DataError(f"{g.date}: maturity set differs from {self.grids[0].date}")
            d = self.dates
            if np.any(np.diff(d) <= np.timedelta64(0, "D")):
                raise DataError("duplicate grid dates in panel")
            self.prices.index_of(d)
        if self.boundary is not None:
            self.boundary = to_date(self.boundary)
            if self.grids and not (self.dates[0] <= self.boundary <= self.dates[-1]):
                raise DataError(f"boundary {self.boundary} outside the panel date range")

    def __len__(self):
        return len(self.grids)

    @property
    def dates(self) -> np.ndarray:
        return np.array([g.date for g in self.grids], dtype="datetime64[D]")

    @property
    def maturities(self) -> np.ndarray:
        return self.grids[0].maturities if self.grids else np.empty(0)

    def price_index(self) -> np.ndarray:
        return self.prices.index_of(self.dates)

    def atm_vol_matrix(self) -> np.ndarray:
        """(n_dates, n_maturities) ATM vols."""
        return np.array([g.atm_vols() for g in self.grids])


# ----------------------------------------------------------------------------- prices I/O


def load_price_csv(path) -> PriceSeries:
    """Read a ``date,close`` CSV (header mandatory); rows are sorted by date."""
    dates, closes = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["date", "close"]:
            raise ParseError(path, 1, "expected header 'date,close'")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise ParseError(path, line, f"expected 2 fields, got {len(row)}")
            try:
                d = to_date(row[0].strip())
                c = float(row[1])
            except ValueError as exc:
                raise ParseError(path, line, f"malformed row {row!r}: {exc}") from None
            if not c > 0:
                raise DataError(f"{path}:{line}: non-positive close {c}")
            dates.append(d)
            closes.append(c)
    d = np.array(dates, dtype="datetime64[D]")
    order = np.argsort(d, kind="stable")
    d, c = d[order], np.array(closes, float)[order]
    dup = np.flatnonzero(np.diff(d) == np.timedelta64(0, "D"))
    if dup.size:
        raise DataError(f"{path}: duplicate date {d[dup[0]]}")
    return PriceSeries(d, c)


def save_price_csv(series: PriceSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "close"])
        for d, c in zip(series.dates, series.closes):
            w.writerow([str(d), repr(float(c))])


# ----------------------------------------------------------------------------- IVS I/O


def load_ivs_csv(path, axis: str = "moneyness") -> list:
    """Read ``date,maturity_months,axis_value,implied_vol`` rows into one grid per date.

    ``axis="auto"`` picks ``delta`` when any axis value is negative.
    """
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["date", "maturity_months", "axis_value", "implied_vol"]
        if header is None or [h.strip().lower() for h in header[:4]] != expected:
            raise ParseError(path, 1, "expected header " + ",".join(expected))
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ParseError(path, line, f"expected 4 fields, got {len(row)}")
            try:
                d = to_date(row[0].strip())
                mm = int(row[1])
                x = float(row[2])
                v = float(row[3])
            except ValueError as exc:
                raise ParseError(path, line, f"malformed row {row!r}: {exc}") from None
            if not v > 0:
                raise DataError(f"{path}:{line}: implied vol must be > 0, got {v}")
            if mm <= 0:
                raise DataError(f"{path}:{line}: maturity must be a positive number of months")
            rows.setdefault(d, {}).setdefault(mm, []).append((x, v))
    if axis == "auto":
        any_neg = any(x < 0 for by_m in rows.values() for pts in by_m.values() for x, _ in pts)
        axis = "delta" if any_neg else "moneyness"
    axis = normalize_axis(axis)
    grids, mset = [], None
    for d in sorted(rows):
        by_m = rows[d]
        months = sorted(by_m)
        if mset is None:
            mset = months
        elif months != mset:
            raise DataError(f"{path}: maturity set on {d} {months} differs from {mset}")
        pts = [sorted(by_m[mm]) for mm in months]
        n = {len(p) for p in pts}
        if len(n) != 1:
            raise DataError(f"{path}: {d} has a different number of axis points per maturity")
        X = np.array([[x for x, _ in p] for p in pts])
        V = np.array([[v for _, v in p] for p in pts])
        if np.any(np.diff(X, axis=1) == 0):
            raise DataError(f"{path}: duplicate axis value on {d}")
        grids.append(IvsGrid(d, np.array(months) / 12.0, axis, X, V))
    return grids


def save_ivs_csv(grids, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "maturity_months", "axis_value", "implied_vol"])
        for g in grids:
            for i, t in enumerate(g.maturities):
                mm = int(round(t * 12))
                for x, v in zip(g.axis_values[i], g.vols[i]):
                    w.writerow([str(g.date), mm, repr(float(x)), repr(float(v))])


def save_panel(panel: IvsPanel, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    save_price_csv(panel.prices, os.path.join(directory, "prices.csv"))
    save_ivs_csv(panel.grids, os.path.join(directory, "ivs.csv"))
    axis = panel.grids[0].axis if panel.grids else "moneyness"
    meta = {"axis": axis, "boundary": None if panel.boundary is None else str(panel.boundary),
            "removed_dates": [str(d) for d in panel.removed_dates]}
    with open(os.path.join(directory, "panel.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_panel(directory) -> IvsPanel:
    with open(os.path.join(directory, "panel.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    prices = load_price_csv(os.path.join(directory, "prices.csv"))
    grids = load_ivs_csv(os.path.join(directory, "ivs.csv"), meta.get("axis", "moneyness"))
    return IvsPanel(grids, prices, meta.get("boundary"), [to_date(d) for d in meta.get("removed_dates", [])])


# ----------------------------------------------------------------------------- filtering / split


def _slice_crosses(k1, w1, k2, w2, rtol=1e-14) -> bool:
    """True when the longer-maturity curve dips strictly below the shorter one on the overlap."""
    lo, hi = max(k1[0], k2[0]), min(k1[-1], k2[-1])
    if lo > hi:
        return False
    knots = np.union1d(k1, k2)
    knots = np.concatenate([[lo], knots[(knots > lo) & (knots < hi)], [hi]])
    # the difference of two piecewise-linear curves is linear between union knots
    d = np.interp(knots, k2, w2) - np.interp(knots, k1, w1)
    tol = rtol * max(np.max(np.abs(w1)), np.max(np.abs(w2)))
    return bool(np.any(d < -tol))


def grid_has_calendar_crossing(grid: IvsGrid) -> bool:
    g = grid.to_moneyness()
    k = np.log(g.axis_values)
    w = g.total_variance()
    return any(_slice_crosses(k[i], w[i], k[i + 1], w[i + 1]) for i in range(g.maturities.size - 1))


def filter_calendar_arbitrage(panel: IvsPanel) -> tuple[IvsPanel, list]:
    """Drop dates whose interpolated total variance decreases between adjacent maturities."""
    keep, removed = [], []
    for g in panel.grids:
        (removed if grid_has_calendar_crossing(g) else keep).append(g)
    removed_dates = [g.date for g in removed]
    boundary = panel.boundary
    if boundary is not None and keep and not (keep[0].date <= boundary <= keep[-1].date):
        boundary = None
    out = IvsPanel(keep, panel.prices, boundary, list(panel.removed_dates) + removed_dates)
    return out, removed_dates


def split(panel: IvsPanel, boundary=None) -> tuple[IvsPanel, IvsPanel]:
    """Train (dates <= boundary) and test (dates > boundary) panels.

    The train panel only sees prices up to the boundary; the test panel keeps the
    full history so its features have their warm-up.
    """
    b = panel.boundary if boundary is None else to_date(boundary)
    if b is None:
        raise DataError("no train/test boundary given")
    d = panel.dates
    if not d.size or not (d[0] <= b <= d[-1]):
        raise DataError(f"boundary {b} outside the panel date range")
    train = [g for g in panel.grids if g.date <= b]
    test = [g for g in panel.grids if g.date > b]
    return (IvsPanel(train, panel.prices.until(b), b, list(panel.removed_dates)),
            IvsPanel(test, panel.prices, None, list(panel.removed_dates)))


def default_boundary(panel: IvsPanel, train_fraction: float = 0.8) -> np.datetime64:
    d = panel.dates
    return d[max(int(math.floor(train_fraction * d.size)) - 1, 0)]


__all__ = [
    "DataError", "IvsGrid", "IvsPanel", "ParseError", "PriceSeries", "default_boundary",
    "filter_calendar_arbitrage", "grid_has_calendar_crossing", "load_ivs_csv", "load_panel", "load_price_csv",
    "save_ivs_csv", "save_panel", "save_price_csv", "split",
]
