"""Command-line front end: ``pdssvi {ingest,calibrate-pdv,fit-ssvi,fit-joint,simulate,validate}``.

Exit codes: 0 success, 1 validation error, 2 numerical or convergence error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from . import data as data_mod
from . import pdv as pdv_mod
from . import validation as val
from .jointmodel import (ASSET_CUTOFFS, PRESET_HYPER, JointFitError, JointModelParams, SimulationConfig,
                         SurfacePathSet, default_threads, fit_joint, initial_state, simulate, warmup_history)
from .pdv import PdvHyperParams, PdvParams
from .processes import NonMeanRevertingError
from .ssvi import calibrate_pssvi_daily, calibrate_ssvi_daily
from .ssvi.blackscholes import NoRootError
from .ssvi.calibration import CalibrationError
from .ssvi.surface import PssviParams

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3
NUMERICAL_ERRORS = (pdv_mod.PdvConvergenceError, pdv_mod.DegenerateTargetError, CalibrationError,
                    NonMeanRevertingError, NoRootError, FloatingPointError, np.linalg.LinAlgError, ArithmeticError)
# keys that affect speed only and are kept out of the echoed config so outputs do not depend on them
RUNTIME_ONLY = ("threads", "config", "func", "command")
# the output location is kept out of the echo so equal runs give byte-identical directories
NOT_ECHOED = RUNTIME_ONLY + ("out",)


class UsageError(ValueError):
    pass


# ----------------------------------------------------------------------------- helpers


def _json_arg(value):
    """Inline JSON or a path to a JSON file."""
    if value is None or isinstance(value, (dict, list)):
        return value
    if os.path.exists(value):
        with open(value, encoding="utf-8") as fh:
            return json.load(fh)
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        raise OSError(f"{value}: not a JSON file or inline JSON") from None


def _effective(args, defaults) -> dict:
    """Flags > config file > built-in defaults."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _json_arg(args.config)
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for k, v in vars(args).items():
        if k in RUNTIME_ONLY or v is None:
            continue
        cfg[k] = v
    return cfg


def _echo(cfg, out) -> None:
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump({k: v for k, v in sorted(cfg.items()) if k not in NOT_ECHOED}, fh, indent=2, sort_keys=True,
                  default=str)
        fh.write("\n")


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _load_panel(cfg):
    panel = data_mod.load_panel(cfg["panel"])
    if cfg.get("boundary"):
        panel = data_mod.IvsPanel(panel.grids, panel.prices, cfg["boundary"], panel.removed_dates)
    if panel.boundary is None:
        panel = data_mod.IvsPanel(panel.grids, panel.prices, data_mod.default_boundary(panel), panel.removed_dates)
    return panel


def _hyper(d, fallback: PdvHyperParams) -> PdvHyperParams:
    if d is None:
        return fallback
    return PdvHyperParams(int(d.get("c_r1", fallback.c_r1)), int(d.get("c_sigma", fallback.c_sigma)),
                          float(d.get("lam", fallback.lam)))


def _read_pssvi_csv(path):
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out[data_mod.to_date(row["date"])] = PssviParams(float(row["a"]), float(row["p"]), float(row["rho"]),
                                                             float(row["eta"]))
    return out


def _daily_pssvi(panel, path=None):
    if path:
        table = _read_pssvi_csv(path)
        missing = [d for d in panel.dates if d not in table]
        if missing:
            raise data_mod.DataError(f"{path}: no parameters for {missing[0]}")
        return [table[d] for d in panel.dates]
    return [calibrate_pssvi_daily(g)[0] for g in panel.grids]


def _grid_spec(spec):
    if spec is None:
        return None
    T = np.asarray(spec["maturities_months"], float) / 12.0
    axis = data_mod.normalize_axis(spec.get("axis", "moneyness"))
    if "axis_values" in spec:
        x = np.asarray(spec["axis_values"], float)
    else:
        lo, hi, step = spec["axis_range"]
        x = np.round(np.arange(lo, hi + 0.5 * step, step), 10)
    return T, x, axis


# ----------------------------------------------------------------------------- commands


def cmd_ingest(cfg) -> int:
    _require(cfg, "prices", "ivs", "out")
    prices = data_mod.load_price_csv(cfg["prices"])
    grids = data_mod.load_ivs_csv(cfg["ivs"], cfg["axis"])
    panel = data_mod.IvsPanel(grids, prices)
    filtered, removed = data_mod.filter_calendar_arbitrage(panel)
    boundary = cfg.get("boundary") or data_mod.default_boundary(filtered)
    filtered = data_mod.IvsPanel(filtered.grids, filtered.prices, boundary, removed)
    train, test = data_mod.split(filtered)
    out = cfg["out"]
    _echo(cfg, out)
    data_mod.save_panel(filtered, os.path.join(out, "panel"))
    _write_csv(os.path.join(out, "removed_dates.csv"), ["date"], [[str(d)] for d in removed])
    report = {"n_dates": len(panel), "n_removed": len(removed), "removed_dates": [str(d) for d in removed],
              "boundary": str(filtered.boundary), "n_train": len(train), "n_test": len(test),
              "axis": filtered.grids[0].axis if filtered.grids else cfg["axis"]}
    _write_json(os.path.join(out, "ingest_report.json"), report)
    print(f"ingested {len(panel)} dates, removed {len(removed)}, boundary {filtered.boundary}")
    for d in removed:
        print(f"  removed {d}")
    return EXIT_OK


TARGETS = ("atm", "a", "logp", "rho", "eta")


def _targets(panel, target, ssvi_path):
    """``[(label, values)]`` aligned with ``panel.dates``."""
    if target == "atm":
        atm = panel.atm_vol_matrix()
        return [(f"{int(round(t * 12))}", atm[:, i]) for i, t in enumerate(panel.maturities)]
    daily = _daily_pssvi(panel, ssvi_path)
    vals = {"a": [d.a for d in daily], "logp": [math.log(d.p) if d.p > 0 else math.nan for d in daily],
            "rho": [d.rho for d in daily], "eta": [d.eta for d in daily]}[target]
    return [(target, np.array(vals))]


def cmd_calibrate_pdv(cfg) -> int:
    _require(cfg, "panel", "out")
    if cfg["target"] not in TARGETS:
        raise UsageError(f"--target must be one of {TARGETS}")
    panel = _load_panel(cfg)
    out = cfg["out"]
    _echo(cfg, out)
    simple = panel.prices.returns()
    ridx = panel.price_index() - 1
    train_mask = panel.dates <= panel.boundary
    hyper = _hyper(_json_arg(cfg.get("hyper")), PdvHyperParams())
    grid = _json_arg(cfg.get("grid"))
    rows, reports, cv_rows = [], {}, []
    for label, y in _targets(panel, cfg["target"], cfg.get("ssvi_params")):
        ytr, itr = y[train_mask], ridx[train_mask]
        yte, ite = y[~train_mask], ridx[~train_mask]
        h = hyper
        if grid:
            hypers = pdv_mod.hyper_grid(grid["c_r1"], grid["lam"], grid.get("c_sigma"))
            cv = pdv_mod.blocked_cross_validate(ytr, simple, hypers, folds=int(grid.get("folds", 10)), index=itr,
                                                dt=panel.prices.dt)
            h = cv.best
            cv_rows += [[label, r["c_r1"], r["c_sigma"], r["lam"], r["mean_r2"], r["smoothed_r2"]] for r in cv.rows()]
        rep = pdv_mod.calibrate(ytr, simple, h, index=itr, dt=panel.prices.dt,
                                test_target=yte if yte.size >= 2 else None,
                                test_index=ite if yte.size >= 2 else None, acf_lags=(1, 50))
        reports[label] = rep.to_dict()
        rows.append([label, h.c_r1, h.c_sigma, h.lam, rep.train_r2,
                     "" if rep.test_r2 is None else rep.test_r2, "" if rep.d_ratio is None else rep.d_ratio,
                     rep.residual_acf.get(1, "")])
    _write_json(os.path.join(out, "reports.json"), reports)
    _write_csv(os.path.join(out, "scores.csv"),
               ["target", "c_r1", "c_sigma", "lam", "train_r2", "test_r2", "d_ratio", "acf1"], rows)
    if cv_rows:
        _write_csv(os.path.join(out, "cv.csv"), ["target", "c_r1", "c_sigma", "lam", "mean_r2", "smoothed_r2"],
                   cv_rows)
    for r in rows:
        print(f"{r[0]}: train R2 {r[4]:.4f}" + (f", test R2 {r[5]:.4f}" if r[5] != "" else ""))
    return EXIT_OK


VARIANTS = ("pssvi", "heston-like", "power-law", "modified-power-law")


def cmd_fit_ssvi(cfg) -> int:
    _require(cfg, "panel", "out")
    if cfg["variant"] not in VARIANTS:
        raise UsageError(f"--variant must be one of {VARIANTS}")
    panel = _load_panel(cfg)
    out = cfg["out"]
    _echo(cfg, out)
    prow, erow = [], []
    for g in panel.grids:
        if cfg["variant"] == "pssvi":
            prm, rep = calibrate_pssvi_daily(g)
            prow.append([str(g.date), prm.a, prm.p, prm.rho, prm.eta])
        else:
            surf, rep = calibrate_ssvi_daily(g, variant=cfg["variant"])
            phi = surf.phi
            prow.append([str(g.date), surf.rho, phi.lam, phi.eta, phi.gamma, *surf.theta])
        erow.append([str(g.date), rep.mean_rel_err, rep.mean_price_err_bps, int(rep.converged), rep.n_points,
                     int(rep.degenerate)])
    if cfg["variant"] == "pssvi":
        header = ["date", "a", "p", "rho", "eta"]
    else:
        header = ["date", "rho", "lam", "eta", "gamma"] + [f"theta_{int(round(t * 12))}m" for t in panel.maturities]
    _write_csv(os.path.join(out, "params.csv"), header,
               [[r[0]] + [float(x) if x is not None else "" for x in r[1:]] for r in prow])
    _write_csv(os.path.join(out, "errors.csv"),
               ["date", "mean_rel_err", "mean_price_err_bps", "converged", "n_points", "degenerate"], erow)
    mean_err = float(np.mean([r[1] for r in erow])) if erow else math.nan
    print(f"fitted {len(erow)} dates, mean relative error {mean_err:.3e}")
    return EXIT_OK


def cmd_fit_joint(cfg) -> int:
    _require(cfg, "panel", "out")
    panel = _load_panel(cfg)
    train, _ = data_mod.split(panel)
    out = cfg["out"]
    _echo(cfg, out)
    spec = cfg.get("hyper")
    if spec in PRESET_HYPER:
        spec = None
        hyper = dict(PRESET_HYPER[cfg["hyper"]])
    else:
        spec = _json_arg(spec)
        hyper = dict(PRESET_HYPER["spx"]) if spec is None else {
            k: _hyper(spec.get(k), PRESET_HYPER["spx"][k]) for k in ("a", "p")}
    cut = (spec or {}).get("S", {})
    cutoffs = (int(cut.get("c_r1", ASSET_CUTOFFS[0])), int(cut.get("c_sigma", ASSET_CUTOFFS[1])))
    daily = _daily_pssvi(train, cfg.get("ssvi_params"))
    fit = fit_joint(train, hyper, daily=daily, asset_cutoffs=cutoffs, return_details=True)
    fit.params.to_json(os.path.join(out, "params.json"))
    _write_json(os.path.join(out, "fit_report.json"), {
        "notes": fit.notes, "degenerate": fit.degenerate, "correlation_repair": fit.repair,
        "correlation_raw": fit.correlation_raw, "train_r2": {k: r.train_r2 for k, r in fit.reports.items()},
        "n_dates": len(train), "boundary": str(train.boundary)})
    _write_csv(os.path.join(out, "daily_pssvi.csv"), ["date", "a", "p", "rho", "eta"],
               [[str(d), p.a, p.p, p.rho, p.eta] for d, p in zip(train.dates, daily)])
    print(f"fitted joint model on {len(train)} dates; degenerate={fit.degenerate}")
    for n in fit.notes:
        print(f"  note: {n}")
    return EXIT_OK


def _load_params(spec) -> JointModelParams:
    if spec.startswith("preset:"):
        return JointModelParams.preset(spec.split(":", 1)[1])
    return JointModelParams.from_json(spec)


def cmd_simulate(cfg, threads) -> int:
    _require(cfg, "params", "out", "seed")
    params = _load_params(cfg["params"])
    seed = int(cfg["seed"])
    dates = None
    mode = cfg["mode"]
    if mode not in ("conditional", "unconditional"):
        raise UsageError("--mode must be conditional or unconditional")
    prices = panel = boundary = None
    if cfg.get("panel"):
        panel = _load_panel(cfg)
        prices, boundary = panel.prices, panel.boundary
    elif cfg.get("prices"):
        prices = data_mod.load_price_csv(cfg["prices"])
        boundary = data_mod.to_date(cfg["boundary"]) if cfg.get("boundary") else None
    horizon = int(cfg["horizon_days"])
    path = None
    if mode == "conditional":
        if prices is None or boundary is None:
            raise UsageError("conditional mode needs --panel (or --prices with --boundary)")
        r = prices.returns()
        b = int(prices.index_of(boundary)[0]) - 1
        warm = r[: b + 1]
        path = r[b + 1: b + 1 + horizon]
        horizon = path.size
        dates = prices.dates[b + 1: b + 2 + horizon]
    elif prices is not None:
        r = prices.returns()
        if boundary is not None:
            r = r[: int(prices.index_of(boundary)[0])]
        warm = r
    else:
        warm = warmup_history(params, seed)
    if warm.size < params.warmup + 1:
        raise UsageError(f"warm-up history has {warm.size} returns; the cut-offs need {params.warmup + 1}")
    warm = warm[-(params.warmup + 1):]
    state_keys = ("eps_a0", "eps_p0", "rho0", "eta0")
    if mode == "conditional" and panel is not None and any(cfg.get(k) is None for k in state_keys):
        # start from the state observed on the boundary date
        observed = initial_state(params, panel)
        for k in state_keys:
            if cfg.get(k) is None:
                cfg[k] = observed[k]
    for k in ("eps_a0", "eps_p0"):
        cfg[k] = 0.0 if cfg.get(k) is None else float(cfg[k])
    config = SimulationConfig(int(cfg["paths"]), horizon, seed, warm, dt=params.dt, mode=mode, price_path=path,
                              eps_a0=cfg["eps_a0"], eps_p0=cfg["eps_p0"], rho0=cfg.get("rho0"),
                              eta0=cfg.get("eta0"), threads=threads)
    out = cfg["out"]
    _echo(cfg, out)
    t0 = time.perf_counter()
    paths = simulate(params, config, dates=dates)
    t_sim = time.perf_counter() - t0
    paths.to_parameter_csv(os.path.join(out, "paths.csv"))
    _write_csv(os.path.join(out, "warmup.csv"), ["simple_return"], [[float(x)] for x in warm])
    audit = paths.arbitrage_audit()
    lr = paths.log_returns()
    summary = {"audit": audit, "n_paths": paths.n_paths, "n_steps": paths.n_steps, "mode": mode,
               "annualized_log_return_std": float(lr.std() * math.sqrt(1.0 / params.dt)) if lr.size else None,
               "sigma_floor_fraction": audit["sigma_floor_events"] / audit["steps"]}
    grid = _grid_spec(_json_arg(cfg.get("grid")))
    if grid is not None:
        T, x, axis = grid
        acc = np.zeros((T.size, x.size))
        for i in range(paths.n_paths):
            acc += paths.implied_vols(T, x, axis, paths=[i])[0].mean(axis=0)
        mean_surface = acc / paths.n_paths
        _write_csv(os.path.join(out, "mean_surface.csv"), ["maturity_months", "axis_value", "mean_vol"],
                   [[round(t * 12.0, 10), float(v), float(mean_surface[m, n])]
                    for m, t in enumerate(T) for n, v in enumerate(x)])
        n_exp = int(cfg.get("export_paths") or 0)
        if n_exp:
            paths.to_ivs_csv(os.path.join(out, "ivs.csv"), T, x, axis, paths=range(min(n_exp, paths.n_paths)))
    _write_json(os.path.join(out, "summary.json"), summary)
    elapsed = time.perf_counter() - t0
    print(f"simulated {paths.n_paths} paths x {paths.n_steps} steps in {t_sim:.2f}s (total {elapsed:.2f}s, "
          f"{threads} threads)")
    print(f"arbitrage violations: {audit['violations']}; sigma floor events: {audit['sigma_floor_events']}")
    return EXIT_OK


WHAT = ("pca", "envelopes", "lagcorr", "density")


def _load_sim(directory):
    with open(os.path.join(directory, "config.json"), encoding="utf-8") as fh:
        cfg = json.load(fh)
    params = _load_params(cfg["params"])
    warm = []
    with open(os.path.join(directory, "warmup.csv"), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        warm = [float(r[0]) for r in reader]
    return SurfacePathSet.from_parameter_csv(os.path.join(directory, "paths.csv"), params.dt, warm), params


def cmd_validate(cfg, threads) -> int:
    _require(cfg, "what", "out")
    what = cfg["what"]
    if what not in WHAT:
        raise UsageError(f"--what must be one of {WHAT}")
    out = cfg["out"]
    T_month = float(cfg["maturity"]) / 12.0
    if what == "pca":
        if cfg.get("sim"):
            grid = _grid_spec(_json_arg(cfg.get("grid")))
            if grid is None:
                raise UsageError("PCA on simulations needs --grid")
            paths, _ = _load_sim(cfg["sim"])
            T, x, axis = grid
            res = val.path_pca(paths, T, x, axis, n_components=int(cfg["components"]), threads=threads)
            _echo(cfg, out)
            _write_csv(os.path.join(out, "pca.csv"), ["component", "mean_explained_ratio"],
                       [[j + 1, float(r)] for j, r in enumerate(res.mean_ratios)])
            val.write_eigenvector_csv(os.path.join(out, "eigenvector.csv"), res.average_eigenvector(1), T, x)
            print("mean explained ratios: " + ", ".join(f"{r:.4f}" for r in res.mean_ratios))
            return EXIT_OK
        _require(cfg, "panel")
        panel = _load_panel(cfg)
        train, _ = data_mod.split(panel)
        X = np.array([g.axis_values for g in train.grids])
        if not np.allclose(X, X[0]):
            raise data_mod.DataError("historical PCA needs the same axis values on every date")
        res = val.pca_log_variations(np.array([g.vols for g in train.grids]))
        _echo(cfg, out)
        val.write_pca_csv(os.path.join(out, "pca.csv"), res)
        val.write_eigenvector_csv(os.path.join(out, "eigenvector.csv"), res.eigenvector_surface(0),
                                  train.maturities, X[0][0])
        print("explained ratios: " + ", ".join(f"{r:.4f}" for r in res.ratios[:4]))
        return EXIT_OK
    if what == "envelopes":
        _require(cfg, "sim")
        paths, _ = _load_sim(cfg["sim"])
        atm = paths.atm_vol(T_month)
        labels = paths.step_labels()
        hist = None
        if cfg.get("panel"):
            if paths.dates is None:
                raise UsageError("a historical overlay needs a conditional (dated) simulation")
            panel = _load_panel(cfg)
            pos = {d: i for i, d in enumerate(panel.dates)}
            keep = np.array([d in pos for d in paths.dates])
            if not keep.any():
                raise data_mod.DataError("panel has no surface on any simulated date")
            atm = atm[:, keep]
            labels = [lab for lab, k in zip(labels, keep) if k]
            hist = np.array([_atm_at(panel.grids[pos[d]], T_month) for d in paths.dates[keep]])
        q = [float(v) for v in cfg["quantiles"]]
        env = val.quantile_envelopes(atm, q, hist)
        _echo(cfg, out)
        val.write_envelope_csv(os.path.join(out, "envelopes.csv"), env, labels)
        _write_json(os.path.join(out, "exits.json"), {f"{lo:g}-{hi:g}": f for (lo, hi), f in
                                                      env.exit_frequency.items()})
        for (lo, hi), f in env.exit_frequency.items():
            print(f"band {lo:g}-{hi:g}: exit frequency {f:.4f}")
        return EXIT_OK
    if what == "lagcorr":
        _require(cfg, "panel")
        panel = _load_panel(cfg)
        atm = np.array([_atm_at(g, T_month) for g in panel.grids])
        r = panel.prices.returns()[panel.price_index() - 1]
        a, b = (atm ** 2, r ** 2) if cfg["kind"] == "squared" else (atm, r)
        lc = val.lag_correlation(a, b, int(cfg["max_lag"]), float(cfg["confidence"]))
        _echo(cfg, out)
        val.write_lag_correlation_csv(os.path.join(out, "lagcorr.csv"), lc)
        print(f"lag-0 correlation {lc.corr[0]:.4f}")
        return EXIT_OK
    _require(cfg, "sim", "pdv")
    paths, _ = _load_sim(cfg["sim"])
    pdv_params = _pdv_from_json(_json_arg(cfg["pdv"]), cfg["maturity"])
    historical = None
    if cfg.get("panel"):
        panel = _load_panel(cfg)
        historical = (panel.prices.returns(), panel.price_index() - 1,
                      np.array([_atm_at(g, T_month) for g in panel.grids]))
    rows = val.export_joint_density_data(paths, pdv_params, T_month, historical)
    _echo(cfg, out)
    val.write_density_csv(os.path.join(out, "density.csv"), rows)
    print(f"wrote {len(rows)} density rows")
    return EXIT_OK


def _pdv_from_json(spec, maturity_months):
    """PDV parameters from a bare dict, one report, or ``calibrate-pdv`` reports keyed by maturity."""
    if "beta0" in spec:
        return PdvParams.from_dict(spec)
    if "params" in spec:
        return PdvParams.from_dict(spec["params"])
    key = f"{int(round(float(maturity_months)))}"
    if key not in spec:
        raise UsageError(f"--pdv holds no parameters for maturity {key} months (have {sorted(spec)})")
    return PdvParams.from_dict(spec[key]["params"])


def _atm_at(grid, T):
    """ATM vol at maturity ``T`` (linear in total variance between quoted maturities)."""
    atm = grid.atm_vols()
    w = atm ** 2 * grid.maturities
    return float(np.sqrt(np.interp(T, grid.maturities, w) / T))


# ----------------------------------------------------------------------------- parser


DEFAULTS = {
    "ingest": {"prices": None, "ivs": None, "axis": "moneyness", "out": None, "boundary": None},
    "calibrate-pdv": {"panel": None, "target": "atm", "hyper": None, "grid": None, "ssvi_params": None,
                      "boundary": None, "out": None},
    "fit-ssvi": {"panel": None, "variant": "pssvi", "boundary": None, "out": None},
    "fit-joint": {"panel": None, "hyper": None, "ssvi_params": None, "boundary": None, "out": None},
    "simulate": {"params": None, "out": None, "seed": None, "paths": 1000, "horizon_days": 504,
                 "mode": "unconditional", "panel": None, "prices": None, "boundary": None, "grid": None,
                 "export_paths": 0, "eps_a0": None, "eps_p0": None, "rho0": None, "eta0": None},
    "validate": {"what": None, "sim": None, "panel": None, "grid": None, "boundary": None, "maturity": 1.0,
                 "quantiles": [0.005, 0.995], "max_lag": 250, "kind": "squared", "confidence": 0.95,
                 "components": 4, "pdv": None, "out": None},
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pdssvi", description="Path-dependent SSVI pipeline.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help="output directory")
        p.add_argument("--config", help="JSON config file (flags take precedence)")
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: CPU count)")

    p = sub.add_parser("ingest", help="load, filter calendar-arbitrage dates, split")
    common(p)
    p.add_argument("--prices")
    p.add_argument("--ivs")
    p.add_argument("--axis", choices=["moneyness", "delta", "auto", "forward-moneyness", "bs-delta"])
    p.add_argument("--boundary", help="last train date (default: 80%% of dates)")

    p = sub.add_parser("calibrate-pdv", help="fit the PDV regression to ATM vols or SSVI parameters")
    common(p)
    p.add_argument("--panel")
    p.add_argument("--target", choices=TARGETS)
    p.add_argument("--hyper", help="JSON {c_r1, c_sigma, lam}")
    p.add_argument("--grid", help="JSON {c_r1: [...], c_sigma: [...], lam: [...], folds}")
    p.add_argument("--ssvi-params", dest="ssvi_params", help="daily PSSVI CSV from fit-ssvi")
    p.add_argument("--boundary")

    p = sub.add_parser("fit-ssvi", help="daily SSVI calibration")
    common(p)
    p.add_argument("--panel")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--boundary")

    p = sub.add_parser("fit-joint", help="calibrate the joint model on the train panel")
    common(p)
    p.add_argument("--panel")
    p.add_argument("--hyper", help='JSON {"S": {c_r1, c_sigma}, "a": {...}, "p": {...}} or a preset name (spx, sx5e)')
    p.add_argument("--ssvi-params", dest="ssvi_params")
    p.add_argument("--boundary")

    p = sub.add_parser("simulate", help="Monte Carlo paths of the joint model")
    common(p)
    p.add_argument("--params", help="params JSON or preset:spx / preset:sx5e")
    p.add_argument("--seed", type=int)
    p.add_argument("--paths", type=int)
    p.add_argument("--horizon-days", dest="horizon_days", type=int)
    p.add_argument("--mode", choices=["conditional", "unconditional"])
    p.add_argument("--panel")
    p.add_argument("--prices")
    p.add_argument("--boundary")
    p.add_argument("--grid", help='JSON {"maturities_months": [...], "axis": ..., "axis_values" | "axis_range"}')
    p.add_argument("--export-paths", dest="export_paths", type=int)
    p.add_argument("--eps-a0", dest="eps_a0", type=float)
    p.add_argument("--eps-p0", dest="eps_p0", type=float)
    p.add_argument("--rho0", type=float)
    p.add_argument("--eta0", type=float)

    p = sub.add_parser("validate", help="PCA, envelopes, lag correlations, density export")
    common(p)
    p.add_argument("--what", choices=WHAT)
    p.add_argument("--sim", help="simulate output directory")
    p.add_argument("--panel")
    p.add_argument("--grid")
    p.add_argument("--boundary")
    p.add_argument("--maturity", type=float, help="maturity in months")
    p.add_argument("--quantiles", type=float, nargs="+")
    p.add_argument("--max-lag", dest="max_lag", type=int)
    p.add_argument("--kind", choices=["squared", "level"])
    p.add_argument("--confidence", type=float)
    p.add_argument("--components", type=int)
    p.add_argument("--pdv", help="PDV params JSON (e.g. calibrate-pdv reports.json)")
    return ap


def _exit_code(exc) -> int:
    cause = exc.__cause__ if isinstance(exc, JointFitError) and exc.__cause__ is not None else exc
    if isinstance(cause, OSError):
        return EXIT_IO
    if isinstance(cause, NUMERICAL_ERRORS) or isinstance(exc, JointFitError) and not isinstance(cause, ValueError):
        return EXIT_NUMERICAL
    if isinstance(cause, (ValueError, KeyError)):
        return EXIT_VALIDATION
    return EXIT_NUMERICAL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads or default_threads()
    try:
        cfg = _effective(args, DEFAULTS[args.command])
        if args.command == "ingest":
            return cmd_ingest(cfg)
        if args.command == "calibrate-pdv":
            return cmd_calibrate_pdv(cfg)
        if args.command == "fit-ssvi":
            return cmd_fit_ssvi(cfg)
        if args.command == "fit-joint":
            return cmd_fit_joint(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg, threads)
        return cmd_validate(cfg, threads)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = _exit_code(exc)
        print(f"pdssvi {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
