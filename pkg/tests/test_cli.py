from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from pdssvi import data
from pdssvi.cli import EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, _exit_code, main
from pdssvi.jointmodel import JointFitError
from pdssvi.pdv import PdvConvergenceError
from pdssvi.jointmodel import synthetic_panel
from test_jointmodel import _corr, small_params

GRID = '{"maturities_months": [1, 3, 6, 12], "axis": "moneyness", "axis_range": [0.8, 1.2, 0.1]}'
HYPER = '{"S": {"c_r1": 20, "c_sigma": 30}, "a": {"c_r1": 25, "c_sigma": 25, "lam": 0}, ' \
        '"p": {"c_r1": 10, "c_sigma": 15, "lam": 0}}'


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    prm = small_params(_corr())
    prm.to_json(root / "params.json")
    panel, _ = synthetic_panel(prm, 300, seed=4, maturities=np.array([1, 3, 6, 12]) / 12,
                               axis_values=[0.8, 0.9, 1.0, 1.1, 1.2])
    data.save_price_csv(panel.prices, root / "prices.csv")
    grids = list(panel.grids)
    # one date whose 6m total variance falls below the 3m level
    g = grids[50]
    vols = g.vols.copy()
    vols[2] *= 0.5
    grids[50] = data.IvsGrid(g.date, g.maturities, g.axis, g.axis_values, vols)
    data.save_ivs_csv(grids, root / "ivs.csv")
    assert main(["ingest", "--prices", str(root / "prices.csv"), "--ivs", str(root / "ivs.csv"),
                 "--out", str(root / "ing")]) == EXIT_OK
    return root, g.date


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_ingest_outputs(workspace):
    root, bad_date = workspace
    rep = json.loads((root / "ing" / "ingest_report.json").read_text())
    assert rep["removed_dates"] == [str(bad_date)]
    assert rep["n_train"] + rep["n_test"] == 299
    assert _rows(root / "ing" / "removed_dates.csv") == [["date"], [str(bad_date)]]
    panel = data.load_panel(root / "ing" / "panel")
    assert len(panel) == 299 and panel.boundary is not None


def test_fit_ssvi_and_calibrate_pdv(workspace):
    root, _ = workspace
    panel = str(root / "ing" / "panel")
    assert main(["fit-ssvi", "--panel", panel, "--out", str(root / "fs")]) == EXIT_OK
    rows = _rows(root / "fs" / "params.csv")
    assert rows[0] == ["date", "a", "p", "rho", "eta"] and len(rows) == 300
    err = _rows(root / "fs" / "errors.csv")
    assert max(float(r[1]) for r in err[1:]) < 1e-6
    assert main(["calibrate-pdv", "--panel", panel, "--target", "a", "--ssvi-params", str(root / "fs" / "params.csv"),
                 "--hyper", '{"c_r1": 25, "c_sigma": 25, "lam": 0}', "--out", str(root / "cp")]) == EXIT_OK
    scores = _rows(root / "cp" / "scores.csv")
    assert scores[1][0] == "a" and float(scores[1][4]) > 0.9
    rep = json.loads((root / "cp" / "reports.json").read_text())
    assert rep["a"]["params"]["c_r1"] == 25
    assert main(["calibrate-pdv", "--panel", panel, "--target", "atm", "--out", str(root / "cpa"),
                 "--hyper", '{"c_r1": 10, "c_sigma": 10}',
                 "--grid", '{"c_r1": [5, 10], "lam": [0.0], "c_sigma": [10], "folds": 3}']) == EXIT_OK
    cv = _rows(root / "cpa" / "cv.csv")
    assert cv[0] == ["target", "c_r1", "c_sigma", "lam", "mean_r2", "smoothed_r2"] and len(cv) == 9


def test_fit_joint_then_simulate(workspace):
    root, _ = workspace
    assert main(["fit-joint", "--panel", str(root / "ing" / "panel"), "--hyper", HYPER,
                 "--out", str(root / "fj")]) == EXIT_OK
    fitted = json.loads((root / "fj" / "params.json").read_text())
    assert fitted["S"]["c_r1"] == 20
    assert main(["simulate", "--params", str(root / "fj" / "params.json"), "--seed", "1", "--paths", "5",
                 "--horizon-days", "10", "--out", str(root / "sj")]) == EXIT_OK


def test_simulate_is_deterministic_across_threads(workspace):
    root, _ = workspace
    outs = []
    for tag, threads in (("a", "1"), ("b", "8"), ("c", "1")):
        out = root / f"sim_{tag}"
        assert main(["simulate", "--params", str(root / "params.json"), "--seed", "9", "--paths", "130",
                     "--horizon-days", "20", "--threads", threads, "--grid", GRID, "--export-paths", "2",
                     "--out", str(out)]) == EXIT_OK
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir())
    assert names == ["config.json", "ivs.csv", "mean_surface.csv", "paths.csv", "summary.json", "warmup.csv"]
    for name in names:
        ref = (outs[0] / name).read_bytes()
        assert all((o / name).read_bytes() == ref for o in outs[1:]), name
    assert "threads" not in json.loads((outs[0] / "config.json").read_text())


def test_conditional_simulation_and_validation(workspace):
    root, _ = workspace
    panel = str(root / "ing" / "panel")
    sim = str(root / "simc")
    assert main(["simulate", "--params", str(root / "params.json"), "--seed", "2", "--paths", "200",
                 "--mode", "conditional", "--panel", panel, "--out", sim]) == EXIT_OK
    summary = json.loads((root / "simc" / "summary.json").read_text())
    assert summary["mode"] == "conditional" and summary["n_steps"] == 60
    assert main(["validate", "--what", "envelopes", "--sim", sim, "--panel", panel,
                 "--out", str(root / "ve")]) == EXIT_OK
    exits = json.loads((root / "ve" / "exits.json").read_text())
    assert list(exits) == ["0.005-0.995"]
    env = _rows(root / "ve" / "envelopes.csv")
    assert env[0] == ["date", "q0.005", "q0.995", "historical"] and len(env) == 62
    assert main(["validate", "--what", "pca", "--sim", sim, "--grid", GRID, "--out", str(root / "vp")]) == EXIT_OK
    assert len(_rows(root / "vp" / "pca.csv")) == 5
    assert main(["validate", "--what", "pca", "--panel", panel, "--out", str(root / "vh")]) == EXIT_OK
    assert main(["validate", "--what", "lagcorr", "--panel", panel, "--max-lag", "10",
                 "--out", str(root / "vl")]) == EXIT_OK
    assert len(_rows(root / "vl" / "lagcorr.csv")) == 12


def test_density_export(workspace):
    root, _ = workspace
    pdv = json.dumps(json.loads((root / "params.json").read_text())["a"])
    assert main(["simulate", "--params", str(root / "params.json"), "--seed", "2", "--paths", "3",
                 "--horizon-days", "5", "--out", str(root / "sd")]) == EXIT_OK
    assert main(["validate", "--what", "density", "--sim", str(root / "sd"), "--pdv", pdv,
                 "--out", str(root / "vd")]) == EXIT_OK
    assert len(_rows(root / "vd" / "density.csv")) == 1 + 3 * 6


def test_config_file_precedence(workspace, tmp_path):
    root, _ = workspace
    cfg = tmp_path / "c.json"
    cfg.write_text('{"paths": 4, "horizon_days": 3, "seed": 5}')
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(cfg), "--params", "preset:spx", "--paths", "2",
                 "--out", str(out)]) == EXIT_OK
    echoed = json.loads((out / "config.json").read_text())
    assert (echoed["paths"], echoed["horizon_days"], echoed["seed"]) == (2, 3, 5)


def test_exit_codes(workspace, tmp_path, capsys):
    root, _ = workspace
    assert main(["simulate", "--params", "preset:spx", "--out", str(tmp_path / "x")]) == EXIT_VALIDATION
    assert "--seed" in capsys.readouterr().err
    assert main(["simulate", "--params", str(tmp_path / "missing.json"), "--seed", "1",
                 "--out", str(tmp_path / "x")]) == EXIT_IO
    bad = tmp_path / "bad.json"
    bad.write_text('{"bogus": 1}')
    assert main(["simulate", "--config", str(bad), "--params", "preset:spx", "--seed", "1",
                 "--out", str(tmp_path / "x")]) == EXIT_VALIDATION
    # cut-offs longer than the price history: the a-regression stage reports missing warm-up
    assert main(["fit-joint", "--panel", str(root / "ing" / "panel"), "--out", str(tmp_path / "fj"),
                 "--hyper", '{"S": {"c_r1": 20, "c_sigma": 30}, "a": {"c_r1": 5000, "c_sigma": 5000}}']) \
        == EXIT_VALIDATION
    assert "pdv a" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["simulate", "--mode", "sideways"])


def test_numerical_failures_map_to_exit_two():
    assert _exit_code(PdvConvergenceError("stalled")) == EXIT_NUMERICAL
    wrapped = JointFitError("pdv a", "stalled")
    wrapped.__cause__ = PdvConvergenceError("stalled")
    assert _exit_code(wrapped) == EXIT_NUMERICAL
    assert _exit_code(OSError("disk")) == EXIT_IO
