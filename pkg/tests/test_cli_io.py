import json
import os

import numpy as np
import pytest

from warpstat import dataio, model_io, simulate
from warpstat.cli import main
from warpstat.errors import ConfigurationError, DataError
from warpstat.fitting import fit_gaussian, predict_from_model, summary_from_model


# --- dataio ---------------------------------------------------------------------


def test_config_validation_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigurationError, match="unknown config keys"):
        dataio.validate_config({"model": "gauss", "bogus": 1})
    with pytest.raises(ConfigurationError, match="unknown model"):
        dataio.validate_config({"model": "quantile"})
    with pytest.raises(ConfigurationError, match="unknown layer"):
        dataio.validate_config({"model": "gauss",
                                "layers": [{"type": "spline"}]})
    with pytest.raises(ConfigurationError, match="unknown optimizer keys"):
        dataio.validate_config({"model": "gauss",
                                "optimizer": {"momentum": 0.9}})
    ok = dataio.validate_config({"model": "gauss"})
    assert ok["model"] == "gauss"


def test_config_hash_stable_and_order_free():
    a = dataio.config_hash({"model": "gauss", "seed": 1})
    b = dataio.config_hash({"seed": 1, "model": "gauss"})
    assert a == b
    c = dataio.config_hash({"model": "gauss", "seed": 2})
    assert a != c


def test_csv_roundtrip_with_meta(tmp_path):
    path = str(tmp_path / "t.csv")
    cols = {"x": np.array([1.5, -0.25]), "z": np.array([1e-17, 3.0])}
    dataio.write_table(path, list(cols), list(cols.values()),
                       meta={"config_hash": "abc", "seed": 7})
    meta, header, out = dataio.read_table(path)
    assert meta == {"config_hash": "abc", "seed": "7"}
    assert header == ["x", "z"]
    assert np.array_equal(out["x"], cols["x"])
    assert np.array_equal(out["z"], cols["z"])   # repr round-trips exactly


def test_csv_strict_parsing(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x,y\n1.0\n")
    with pytest.raises(DataError, match="expected 2 fields"):
        dataio.read_table(str(p))
    p.write_text("x,y\n1.0,hello\n")
    with pytest.raises(DataError, match="non-numeric"):
        dataio.read_table(str(p))
    p.write_text("x,y\n")
    with pytest.raises(DataError, match="no data rows"):
        dataio.read_table(str(p))


def test_gauss_table_loader(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x,y,elev,z\n0.1,0.2,10.0,1.5\n0.3,0.4,20.0,2.5\n")
    config = {"coords": ["x", "y"], "covariates": ["elev"], "response": "z"}
    table = dataio.load_gauss_table(config, str(p))
    assert table["S_raw"].shape == (2, 2)
    assert table["X"].shape == (2, 2)            # intercept + elev
    assert np.array_equal(table["X"][:, 0], [1.0, 1.0])
    with pytest.raises(DataError, match="missing columns"):
        dataio.load_gauss_table({"coords": ["lon", "lat"]}, str(p))


def test_wide_table_loader(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text("x,y,z1,z2,z3\n0.0,0.0,1.0,2.0,3.0\n0.5,0.5,4.0,5.0,6.0\n")
    wide = dataio.load_wide_table({"coords": ["x", "y"]}, str(p))
    assert wide["fields"].shape == (3, 2)
    assert np.array_equal(wide["fields"][:, 1], [4.0, 5.0, 6.0])


# --- simulators -----------------------------------------------------------------


def test_simulate_deterministic_and_noise_free():
    t1, truth1 = simulate.sim_awu_rbf_2d(n=80, ds=0.05, sigma2y=0.0, seed=11)
    t2, _ = simulate.sim_awu_rbf_2d(n=80, ds=0.05, sigma2y=0.0, seed=11)
    assert np.array_equal(t1["z"], t2["z"])
    t3, _ = simulate.sim_awu_rbf_2d(n=80, ds=0.05, sigma2y=0.01, seed=11)
    assert not np.array_equal(t1["z"], t3["z"])
    assert truth1["stack"]["units"][0]["kind"] == "awu"


def test_simulate_rejects_oversampling():
    with pytest.raises(ConfigurationError, match="cannot sample"):
        simulate.sim_awu_rbf_2d(n=10000, ds=0.2, seed=0)


def test_simulate_grid_footprint():
    table, truth = simulate.sim_awu_rbf_2d(n=50, ds=0.1, seed=1)
    S = np.column_stack([table["x"], table["y"]])
    assert S.min() >= -0.5 and S.max() <= 0.5
    # coordinates sit on the ds lattice
    assert np.allclose(np.round((S + 0.5) / 0.1), (S + 0.5) / 0.1, atol=1e-9)


def test_stationary_gp_empirical_variogram():
    """Monte-Carlo check: semivariance near lag ell is sigma2 (1 - e^{-1}).

    A short lengthscale keeps the single-realization fluctuation of the
    empirical variogram well under the 10% tolerance (the domain holds
    ~(1/ell)^2 quasi-independent patches).
    """
    sigma2, ell = 1.0, 0.05
    table, _ = simulate.sim_stationary_gp(n=3000, ds=0.01, sigma2y=0.0,
                                          variance=sigma2, lengthscale=ell,
                                          seed=23)
    S = np.column_stack([table["x"], table["y"]])
    z = table["z"]
    D = np.sqrt(((S[:, None] - S[None]) ** 2).sum(-1))
    iu = np.triu_indices(len(z), 1)
    d = D[iu]
    dz2 = (z[iu[0]] - z[iu[1]]) ** 2
    band = (d > ell * 0.9) & (d < ell * 1.1)
    gamma_hat = 0.5 * dz2[band].mean()
    expected = sigma2 * (1 - np.exp(-1.0))
    assert abs(gamma_hat - expected) / expected < 0.10


def test_br_fields_simulator_shapes():
    table, truth = simulate.sim_br_fields(sites=5, replicates=7,
                                          n_spectral=200, seed=2)
    assert len([k for k in table if k.startswith("z")]) == 7
    assert truth["type"] == "BR_approx"


# --- model round trip --------------------------------------------------------------


def _tiny_gauss_config(**over):
    cfg = {
        "model": "gauss",
        "backend": "exact",
        "coords": ["x", "y"],
        "response": "z",
        "intercept": True,
        "layers": [
            {"type": "awu", "dim": 1, "r": 6, "steepness": 30.0},
            {"type": "awu", "dim": 2, "r": 6, "steepness": 30.0},
            {"type": "rbf", "res": 1},
            {"type": "mobius"},
        ],
        "optimizer": {"nsteps": 8, "nsteps_pre": 3},
        "seed": 5,
    }
    cfg.update(over)
    return dataio.validate_config(cfg)


def test_fit_save_load_predict_bit_identical(tmp_path):
    table, _ = simulate.sim_awu_rbf_2d(n=60, ds=0.05, sigma2y=0.01, seed=3)
    cfg = _tiny_gauss_config()
    data = {
        "S_raw": np.column_stack([table["x"], table["y"]]),
        "z": table["z"],
        "X": np.ones((60, 1)),
        "t_raw": None,
        "proc": None,
    }
    model, trace = fit_gaussian(cfg, data, seed=5)
    newdata = {"S_raw": data["S_raw"][:10] + 0.01, "X": np.ones((10, 1)),
               "t_raw": None, "proc": None}
    direct = predict_from_model(model, newdata)

    path = str(tmp_path / "m.json")
    model_io.save_model(model, path, config_hash="deadbeef")
    loaded = model_io.load_model(path)
    roundtrip = predict_from_model(loaded, newdata)
    assert np.array_equal(direct.mean, roundtrip.mean)
    assert np.array_equal(direct.stderr, roundtrip.stderr)


def test_fit_deterministic_model_files(tmp_path):
    table, _ = simulate.sim_awu_rbf_2d(n=50, ds=0.05, sigma2y=0.01, seed=9)
    data = {
        "S_raw": np.column_stack([table["x"], table["y"]]),
        "z": table["z"], "X": np.ones((50, 1)), "t_raw": None, "proc": None,
    }
    cfg = _tiny_gauss_config()
    p1, p2 = str(tmp_path / "a.json"), str(tmp_path / "b.json")
    m1, _ = fit_gaussian(cfg, data, seed=5)
    m2, _ = fit_gaussian(cfg, data, seed=5)
    model_io.save_model(m1, p1, config_hash="h")
    model_io.save_model(m2, p2, config_hash="h")
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_summary_from_model_reference_site(tmp_path):
    table, _ = simulate.sim_awu_rbf_2d(n=40, ds=0.1, sigma2y=0.01, seed=4)
    data = {
        "S_raw": np.column_stack([table["x"], table["y"]]),
        "z": table["z"], "X": np.ones((40, 1)), "t_raw": None, "proc": None,
    }
    cfg = _tiny_gauss_config(optimizer={"nsteps": 2, "nsteps_pre": 0})
    model, _ = fit_gaussian(cfg, data, seed=1)
    S_new = data["S_raw"][:8]
    out, curve = summary_from_model(model, S_new, reference_sites=S_new[:1])
    # reference site equals a newdata site: correlation 1 at that row
    assert out["val_ref1"][0] == pytest.approx(1.0)
    assert np.all(out["val_ref1"] <= 1.0)
    assert curve["value"][0] == pytest.approx(1.0)
    # warped coordinates present for all sites
    assert out["wx"].shape == (8,)


def test_summary_isotropy_for_identity_warp(tmp_path, rng):
    """With no warp, the map value depends only on distance."""
    n = 30
    S = rng.uniform(0, 10, size=(n, 2))
    S[0] = [0.0, 0.0]
    S[1] = [10.0, 10.0]   # equal axis spans keep the rescaling isotropic
    data = {"S_raw": S, "z": rng.normal(size=n), "X": np.ones((n, 1)),
            "t_raw": None, "proc": None}
    cfg = _tiny_gauss_config(layers=[], optimizer={"nsteps": 2, "nsteps_pre": 0})
    model, _ = fit_gaussian(cfg, data, seed=1)
    ref = np.array([[5.0, 5.0]])
    probe = np.array([[5.0 + 2.0, 5.0], [5.0, 5.0 + 2.0],
                      [5.0 - 2.0, 5.0], [5.0, 5.0 - 2.0]])
    out, _ = summary_from_model(model, probe, reference_sites=ref)
    vals = out["val_ref1"]
    assert np.allclose(vals, vals[0], rtol=1e-9)


# --- CLI end to end -----------------------------------------------------------------


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh)


def test_cli_full_gaussian_workflow(tmp_path):
    simcfg = tmp_path / "sim.json"
    _write_json(simcfg, {"model": "simulate", "type": "AWU_RBF_2D", "n": 120,
                         "ds": 0.05, "sigma2y": 0.01, "seed": 2})
    data_csv = tmp_path / "data.csv"
    assert main(["simulate", "--config", str(simcfg), "--out", str(data_csv)]) == 0
    assert (tmp_path / "data_truth.json").exists()

    meta, header, cols = dataio.read_table(str(data_csv))
    assert header == ["x", "y", "z"]
    assert "config_hash" in meta

    # split train/test
    train_csv = tmp_path / "train.csv"
    test_csv = tmp_path / "test.csv"
    dataio.write_table(str(train_csv), header,
                       [cols[h][:80] for h in header])
    dataio.write_table(str(test_csv), header,
                       [cols[h][80:] for h in header])

    fitcfg = tmp_path / "fit.json"
    _write_json(fitcfg, {
        "model": "gauss", "backend": "exact", "coords": ["x", "y"],
        "response": "z",
        "layers": [{"type": "awu", "dim": 1, "r": 5, "steepness": 30.0},
                   {"type": "rbf", "res": 1}],
        "optimizer": {"nsteps": 5, "nsteps_pre": 2}, "seed": 3,
    })
    model_path = tmp_path / "model.json"
    assert main(["fit", "--config", str(fitcfg), "--data", str(train_csv),
                 "--out", str(model_path)]) == 0
    assert (tmp_path / "model_trace.csv").exists()

    pred_csv = tmp_path / "pred.csv"
    assert main(["predict", "--model", str(model_path), "--data",
                 str(test_csv), "--out", str(pred_csv)]) == 0
    _, pred_header, pred_cols = dataio.read_table(str(pred_csv))
    assert pred_header == ["x", "y", "mean", "stderr", "extrapolation"]
    assert np.all(pred_cols["stderr"] > 0)

    metrics_json = tmp_path / "metrics.json"
    assert main(["score", "--pred", str(pred_csv), "--truth", str(test_csv),
                 "--out", str(metrics_json)]) == 0
    doc = json.load(open(metrics_json))
    assert {"rmspe", "crps", "n"} <= set(doc) and doc["n"] == 40
    assert "config_hash" in doc   # provenance carried from the pred file

    summ_csv = tmp_path / "summary.csv"
    assert main(["summary", "--model", str(model_path), "--data",
                 str(test_csv), "--out", str(summ_csv)]) == 0
    assert (tmp_path / "summary_curve.csv").exists()


def test_cli_determinism_bit_identical_models(tmp_path):
    data_csv = tmp_path / "d.csv"
    table, _ = simulate.sim_awu_rbf_2d(n=60, ds=0.05, sigma2y=0.01, seed=8)
    dataio.write_table(str(data_csv), ["x", "y", "z"],
                       [table["x"], table["y"], table["z"]])
    fitcfg = tmp_path / "fit.json"
    _write_json(fitcfg, {
        "model": "gauss", "coords": ["x", "y"], "response": "z",
        "layers": [{"type": "awu", "dim": 1, "r": 4, "steepness": 20.0}],
        "optimizer": {"nsteps": 4}, "seed": 1,
    })
    m1, m2 = tmp_path / "m1.json", tmp_path / "m2.json"
    assert main(["fit", "--config", str(fitcfg), "--data", str(data_csv),
                 "--out", str(m1), "--deterministic"]) == 0
    assert main(["fit", "--config", str(fitcfg), "--data", str(data_csv),
                 "--out", str(m2), "--deterministic"]) == 0
    assert open(m1, "rb").read() == open(m2, "rb").read()


def test_cli_extremes_fit_and_predict_rejection(tmp_path):
    data_csv = tmp_path / "w.csv"
    table, _ = simulate.sim_br_fields(sites=12, replicates=40,
                                      n_spectral=300, seed=5)
    header = list(table)
    dataio.write_table(str(data_csv), header, [table[h] for h in header])

    fitcfg = tmp_path / "ms.json"
    _write_json(fitcfg, {
        "model": "maxstable", "method": "wls", "coords": ["x", "y"],
        "layers": [{"type": "awu", "dim": 1, "r": 4, "steepness": 20.0}],
        "optimizer": {"nsteps": 10, "nsteps_pre": 5}, "seed": 4,
    })
    model_path = tmp_path / "ms_model.json"
    assert main(["fit", "--config", str(fitcfg), "--data", str(data_csv),
                 "--out", str(model_path)]) == 0

    # prediction is undefined for extremes models: configuration error (2)
    pred_csv = tmp_path / "p.csv"
    assert main(["predict", "--model", str(model_path), "--data",
                 str(data_csv), "--out", str(pred_csv)]) == 2

    # summary works and produces extremal coefficients in [1, 2]
    summ_csv = tmp_path / "s.csv"
    assert main(["summary", "--model", str(model_path), "--data",
                 str(data_csv), "--out", str(summ_csv)]) == 0
    _, _, scols = dataio.read_table(str(summ_csv))
    assert np.all(scols["val_ref1"] >= 1.0 - 1e-12)
    assert np.all(scols["val_ref1"] <= 2.0 + 1e-12)


def test_cli_exit_codes(tmp_path):
    bad_cfg = tmp_path / "bad.json"
    _write_json(bad_cfg, {"model": "gauss", "wat": 1})
    out = tmp_path / "o.csv"
    assert main(["simulate", "--config", str(bad_cfg), "--out", str(out)]) == 2

    good_cfg = tmp_path / "ok.json"
    _write_json(good_cfg, {"model": "gauss", "coords": ["x", "y"],
                           "response": "z", "layers": []})
    missing = tmp_path / "missing.csv"
    missing.write_text("a,b\n1,2\n")
    assert main(["fit", "--config", str(good_cfg), "--data", str(missing),
                 "--out", str(out)]) == 3

    nofile = tmp_path / "nope.csv"
    assert main(["fit", "--config", str(good_cfg), "--data", str(nofile),
                 "--out", str(out)]) == 3


def test_cli_score_row_mismatch(tmp_path):
    pred = tmp_path / "p.csv"
    truth = tmp_path / "t.csv"
    dataio.write_table(str(pred), ["mean", "stderr"],
                       [np.zeros(3), np.ones(3)])
    dataio.write_table(str(truth), ["z"], [np.zeros(4)])
    out = tmp_path / "m.json"
    assert main(["score", "--pred", str(pred), "--truth", str(truth),
                 "--out", str(out)]) == 3
