"""High-level pipelines: run configuration plus data in, fitted model out.

These functions own the full fitting recipe: rescale coordinates onto the
working box, build warp stacks and parameter initializations, dispatch to
the requested likelihood backend or extremes objective, run the optimizer,
and assemble the serializable fitted model (final weights, frozen
renormalizations, trend estimate, structures).
"""

import warnings

import numpy as np

from . import engine
from .covario import CovParams, CrossCovParams, StParams, VarioParams, cov_iso
from .dataio import config_hash
from .errors import ConfigurationError, DataError
from .extremes import (
    ExceedanceDataset,
    ExtremesModelSpec,
    GsmObjective,
    MaximaDataset,
    PairSet,
    PclObjective,
    RplObjective,
    WlsObjective,
    _risk_rows,
    cep_chi,
    empirical_cep,
    empirical_ec,
    extremal_coefficient,
    frechet_standardize,
)
from .gauss import (
    FrkObjective,
    GaussData,
    GaussModelSpec,
    NngpObjective,
    RemlObjective,
    build_frk,
    build_nngp,
    frk_gls_beta,
    gls_beta,
    predict_gp,
)
from .model_io import FittedModel, _cov_to_dict, trace_digest
from .params import LearnRates
from .warp import (
    AxialWarpUnit,
    MobiusUnit,
    RbfBlockUnit,
    Rescaler,
    WarpStack,
    freeze_affines,
)

DEFAULT_LAYERS = [
    {"type": "awu", "dim": 1, "r": 50, "steepness": 200.0},
    {"type": "awu", "dim": 2, "r": 50, "steepness": 200.0},
    {"type": "rbf", "res": 1},
    {"type": "mobius"},
]


def build_stack(layer_configs, input_dim=2):
    units = []
    for lc in layer_configs:
        kind = lc["type"]
        if kind == "awu":
            units.append(AxialWarpUnit.default(
                dim=int(lc.get("dim", 1)), r=int(lc.get("r", 50)),
                steepness=float(lc.get("steepness", 200.0))))
        elif kind == "rbf":
            units.append(RbfBlockUnit(res=int(lc.get("res", 1))))
        elif kind == "mobius":
            units.append(MobiusUnit())
        else:
            raise ConfigurationError(f"unknown layer type {kind!r}")
    return WarpStack(units, input_dim=input_dim)


def _fit_config(config, seed):
    opt = config.get("optimizer", {})
    return engine.FitConfig(
        nsteps=int(opt.get("nsteps", 100)),
        nsteps_pre=int(opt.get("nsteps_pre", 0)),
        optimizer=opt.get("method", "adam"),
        seed=seed,
        tolerance=float(opt.get("tolerance", 0.0)),
    )


def _learn_rates(config):
    lr = config.get("learn_rates", {})
    return LearnRates(
        warp_weights=float(lr.get("warp_weights", 0.02)),
        mobius=float(lr.get("mobius", 0.001)),
        dependence=float(lr.get("dependence", 0.01)),
        noise=float(lr.get("noise", 0.01)),
    )


def _apply_final_params(spec_obj, pv):
    """Write the optimizer's final natural values back into the model spec."""
    naturals = pv.naturals()
    for prefix, stack in (("warp1", spec_obj.stack),
                          ("warpt", getattr(spec_obj, "temporal_stack", None)),
                          ("warp2", getattr(spec_obj, "stack2", None))):
        if stack is None:
            continue
        weights = [naturals[f"{prefix}.{i}.{u.kind}"]
                   for i, u in enumerate(stack.units)]
        stack.set_weights(weights)
    cov = spec_obj.cov if hasattr(spec_obj, "cov") else spec_obj.vario
    if isinstance(cov, CovParams):
        cov.variance = float(naturals["cov.variance"][0])
        cov.lengthscale = float(naturals["cov.lengthscale"][0])
    elif isinstance(cov, StParams):
        cov.cov_s.variance = float(naturals["st.variance"][0])
        cov.cov_s.lengthscale = float(naturals["st.lengthscale_s"][0])
        cov.cov_t.lengthscale = float(naturals["st.lengthscale_t"][0])
    elif isinstance(cov, CrossCovParams):
        cov.variance1 = float(naturals["crosscov.variance1"][0])
        cov.variance2 = float(naturals["crosscov.variance2"][0])
        cov.lengthscale = float(naturals["crosscov.lengthscale"][0])
        cov.rho = float(naturals["crosscov.rho"][0])
    elif isinstance(cov, VarioParams):
        cov.range_ = float(naturals["vario.range"][0])
        cov.smoothness = float(naturals["vario.smoothness"][0])
    if "noise.variance" in naturals:
        spec_obj.noise_variance = naturals["noise.variance"].copy()


# --- Gaussian pipeline -----------------------------------------------------------


def _init_scalars(config, z, X):
    init = config.get("init", {})
    if X.shape[1]:
        resid = z - X @ np.linalg.lstsq(X, z, rcond=None)[0]
    else:
        resid = z - z.mean()
    var0 = float(init.get("variance") or max(resid.var(), 1e-8))
    l_top = float(init.get("l_top", 0.5))
    ell0 = float(init.get("lengthscale") or l_top * np.sqrt(2.0))
    noise0 = float(init.get("noise_variance") or 0.1 * var0)
    return var0, ell0, noise0


def fit_gaussian(config, table, seed=0):
    """Fit a Gaussian model (exact / nngp / frk; spatial, spatio-temporal,
    or bivariate) and return (FittedModel, trace CSV text)."""
    backend = config.get("backend", "exact")
    family = config.get("family", "exponential")
    layers = config.get("layers", DEFAULT_LAYERS)
    S_raw, z, X = table["S_raw"], table["z"], table["X"]
    t_raw = table.get("t_raw")
    proc = table.get("proc")

    rescaler_s = Rescaler.fit(S_raw)
    S = rescaler_s.transform(S_raw)
    rescaler_t = None
    t = None
    if t_raw is not None:
        rescaler_t = Rescaler.fit(t_raw)
        t = rescaler_t.transform(t_raw)

    var0, ell0, noise0 = _init_scalars(config, z, X)
    stack = build_stack(layers, input_dim=2)
    temporal_stack = None
    stack2 = None

    if proc is not None:
        if backend != "exact":
            raise ConfigurationError("bivariate models support the exact backend only")
        cov = CrossCovParams(var0, var0, ell0, rho=0.0, family=family)
        stack2 = build_stack(config.get("layers", DEFAULT_LAYERS), input_dim=2)
        spec = GaussModelSpec(stack=stack, cov=cov,
                              noise_variance=(noise0, noise0), backend=backend,
                              stack2=stack2)
        data = tuple(
            GaussData(S=S[proc == p], z=z[proc == p],
                      X=X[proc == p] if X.size else None)
            for p in (1, 2)
        )
        if any(d.n == 0 for d in data):
            raise DataError("both processes need at least one observation")
    elif t is not None:
        if backend == "frk":
            raise ConfigurationError(
                "spatio-temporal models support exact and nngp backends"
            )
        temporal_stack = build_stack(
            config.get("temporal_layers",
                       [{"type": "awu", "dim": 1, "r": 20, "steepness": 20.0}]),
            input_dim=1,
        )
        cov = StParams(CovParams(var0, ell0, family), CovParams(1.0, ell0, family))
        spec = GaussModelSpec(stack=stack, cov=cov, noise_variance=noise0,
                              backend=backend, temporal_stack=temporal_stack)
        data = GaussData(S=S, z=z, X=X, t=t)
    else:
        cov = CovParams(var0, ell0, family)
        spec = GaussModelSpec(stack=stack, cov=cov, noise_variance=noise0,
                              backend=backend)
        data = GaussData(S=S, z=z, X=X)

    structure = None
    structure_kind = None
    if backend == "nngp":
        coords_for_nn = S if t is None else np.column_stack([S, t])
        structure = build_nngp(coords_for_nn, m=int(config.get("neighbors", 50)),
                               order_seed=seed)
        structure_kind = "nngp"
        objective = NngpObjective(spec, data, structure)
    elif backend == "frk":
        k_axis = int(round(np.sqrt(int(config.get("basis", 400)))))
        structure = build_frk(data.n, k_axis)
        structure_kind = "frk"
        objective = FrkObjective(spec, data, structure)
    else:
        objective = RemlObjective(spec, data)

    result = engine.fit(objective, _fit_config(config, seed), _learn_rates(config))
    trace_csv = engine.trace_to_csv(result.trace)
    _apply_final_params(spec, result.params)

    # trend estimate and frozen renormalizations at the final parameters
    if backend == "nngp":
        beta, beta_cov = objective.gls_beta()
    elif backend == "frk":
        beta, beta_cov = frk_gls_beta(objective)
    else:
        beta, beta_cov = gls_beta(spec, data)

    if spec.kind == "bivariate":
        _, aff1 = spec.stack.forward(data[0].S)
        _, aff2 = spec.stack2.forward(data[1].S)
        affines1, affines2, affines_t = freeze_affines(aff1), freeze_affines(aff2), None
    else:
        _, aff1 = spec.stack.forward(data.S)
        affines1 = freeze_affines(aff1)
        affines2 = None
        affines_t = None
        if data.t is not None:
            _, afft = spec.temporal_stack.forward(data.t)
            affines_t = freeze_affines(afft)

    train = {
        "S_raw": S_raw.tolist(),
        "z": z.tolist(),
        "X": X.tolist(),
        "t_raw": t_raw.tolist() if t_raw is not None else None,
        "proc": proc.tolist() if proc is not None else None,
    }
    model = FittedModel(
        model="gauss",
        backend=backend,
        config=config,
        seed=seed,
        stack=spec.stack.to_dict(),
        temporal_stack=(spec.temporal_stack.to_dict()
                        if spec.temporal_stack else None),
        stack2=spec.stack2.to_dict() if spec.stack2 else None,
        cov=_cov_to_dict(spec.cov),
        noise=[float(v) for v in np.atleast_1d(spec.noise_variance)],
        beta=[float(b) for b in beta],
        beta_cov=[float(v) for v in np.asarray(beta_cov).ravel()],
        rescaler_s=rescaler_s.to_dict(),
        rescaler_t=rescaler_t.to_dict() if rescaler_t else None,
        affines1=affines1,
        affines_t=affines_t,
        affines2=affines2,
        structure=structure.to_dict() if structure is not None else None,
        structure_kind=structure_kind,
        train=train,
        trace_digest=trace_digest(trace_csv),
    )
    return model, trace_csv


# --- extremes pipeline --------------------------------------------------------


def fit_extremes(config, wide, seed=0):
    """Fit a max-stable or r-Pareto dependence model; returns
    (FittedModel, trace CSV text)."""
    model_kind = config["model"]                      # maxstable | rpareto
    method = config.get("method", "wls")
    if model_kind == "maxstable" and method not in ("wls", "pcl", "rpl"):
        raise ConfigurationError(f"max-stable models support wls/pcl/rpl, not {method}")
    if model_kind == "rpareto" and method not in ("wls", "gsm"):
        raise ConfigurationError(f"r-Pareto models support wls/gsm, not {method}")

    coords_raw = wide["coords_raw"]
    fields_raw = wide["fields"]
    n = coords_raw.shape[0]
    rescaler_s = Rescaler.fit(coords_raw)
    coords = rescaler_s.transform(coords_raw)

    init = config.get("init", {})
    vario = VarioParams(
        range_=float(init.get("range") or 0.5 * np.sqrt(2.0)),
        smoothness=float(init.get("smoothness", 1.0)),
    )
    stack = build_stack(config.get("layers", DEFAULT_LAYERS), input_dim=2)
    risk = config.get("risk", "max")
    site_index = int(config.get("site_index", 0))
    standardize = bool(config.get("standardize", True))
    pair_fraction = float(config.get("pair_fraction", 1.0))

    threshold = None
    if model_kind == "maxstable":
        maxima = frechet_standardize(fields_raw) if standardize else fields_raw
        dataset = MaximaDataset(coords=coords, maxima=maxima)
        spec = ExtremesModelSpec(stack=stack, vario=vario, method=method)
        if method == "wls":
            pairs = (PairSet.bernoulli(n, pair_fraction, seed)
                     if pair_fraction < 1 else PairSet.all_pairs(n))
            emp = np.array([empirical_ec(dataset, p) for p in pairs.pairs])
            objective = WlsObjective(spec, coords, pairs, emp, mode="maxstable")
        elif method == "pcl":
            pairs = (PairSet.bernoulli(n, pair_fraction, seed)
                     if pair_fraction < 1 else PairSet.all_pairs(n))
            objective = PclObjective(spec, dataset, pairs)
        else:
            pairs = PairSet.all_pairs(n)
            masks = pairs.replicate_masks(
                dataset.n_reps, float(config.get("mask_fraction", 1.0)), seed
            )
            objective = RplObjective(spec, dataset, pairs, masks)
    else:
        x = frechet_standardize(fields_raw, scale="pareto") if standardize \
            else fields_raw
        r = _risk_rows(risk, x, site_index)
        threshold = float(np.quantile(r, float(config.get("risk_quantile", 0.95))))
        if threshold <= 1:
            raise DataError(
                f"risk threshold {threshold:.3f} <= 1 on the Pareto scale; "
                "raise risk_quantile"
            )
        dataset = ExceedanceDataset(coords=coords, fields=x, threshold=threshold,
                                    risk=risk, site_index=site_index)
        spec = ExtremesModelSpec(stack=stack, vario=vario, method=method,
                                 risk=risk, site_index=site_index,
                                 threshold=threshold)
        if method == "wls":
            u_prime = 1.0 / (1.0 - float(config.get("cep_quantile", 0.95)))
            pairs = (PairSet.bernoulli(n, pair_fraction, seed)
                     if pair_fraction < 1 else PairSet.all_pairs(n))
            emp = []
            for p in pairs.pairs:
                val, ok = empirical_cep(dataset, p, u_prime)
                emp.append(val if ok else np.nan)
            objective = WlsObjective(spec, coords, pairs, np.array(emp),
                                     mode="rpareto")
        else:
            objective = GsmObjective(spec, dataset)

    result = engine.fit(objective, _fit_config(config, seed), _learn_rates(config))
    trace_csv = engine.trace_to_csv(result.trace)
    _apply_final_params(spec, result.params)
    _, aff1 = spec.stack.forward(coords)

    model = FittedModel(
        model=model_kind,
        method=method,
        config=config,
        seed=seed,
        stack=spec.stack.to_dict(),
        cov=_cov_to_dict(spec.vario),
        rescaler_s=rescaler_s.to_dict(),
        affines1=freeze_affines(aff1),
        train={"S_raw": coords_raw.tolist()},
        threshold=threshold,
        risk=risk,
        site_index=site_index,
        trace_digest=trace_digest(trace_csv),
    )
    return model, trace_csv


# --- prediction and summaries ----------------------------------------------------


def predict_from_model(model, table):
    """Kriging at the rows of a parsed newdata table (Gaussian models only)."""
    fit = model.gauss_fit()
    rs = model.spatial_rescaler()
    S_new = rs.transform(table["S_raw"])
    flags = rs.outside_mask(table["S_raw"])
    t_new = None
    if model.temporal_stack is not None:
        if table.get("t_raw") is None:
            raise DataError("this model needs a time column in newdata")
        rt = model.temporal_rescaler()
        t_new = rt.transform(table["t_raw"])
        flags = flags | rt.outside_mask(table["t_raw"])
    return predict_gp(fit, S_new, X_new=table["X"], t_new=t_new,
                      proc_new=table.get("proc"), extrapolation=flags)


def summary_from_model(model, S_new_raw, reference_sites=None, n_curve=200):
    """Dependence maps against reference sites plus the distance curve.

    Returns (map dict of columns, curve dict of columns). Values are
    correlations for Gaussian models, extremal coefficients for max-stable
    models, and limiting CEPs for r-Pareto models.
    """
    rs = model.spatial_rescaler()
    S_new_raw = np.asarray(S_new_raw, dtype=np.float64)
    if reference_sites is None:
        reference_sites = S_new_raw[:1]
    reference_sites = np.asarray(reference_sites, dtype=np.float64).reshape(-1, 2)
    outside = rs.outside_mask(reference_sites)
    if outside.any():
        warnings.warn(f"{int(outside.sum())} reference site(s) outside the "
                      "training domain hull", stacklevel=2)

    stack = model.warp_stack()
    S_new = rs.transform(S_new_raw)
    refs = rs.transform(reference_sites)
    W_new, _ = stack.forward(S_new, frozen_affines=model.affines1)
    W_ref, _ = stack.forward(refs, frozen_affines=model.affines1)
    W_new, W_ref = W_new.value, W_ref.value

    params = model.dependence_params()

    def pair_value(h):
        h = np.asarray(h, dtype=np.float64)
        if model.model == "gauss":
            if isinstance(params, StParams):
                fam, ell = params.cov_s.family, params.cov_s.lengthscale
            elif isinstance(params, CrossCovParams):
                fam, ell = params.family, params.lengthscale
            else:
                fam, ell = params.family, params.lengthscale
            return cov_iso(fam, h, 1.0, ell).value
        gamma = (h / params.range_) ** params.smoothness
        if model.model == "maxstable":
            return extremal_coefficient(gamma)
        return cep_chi(gamma)

    out = {
        "x": S_new_raw[:, 0],
        "y": S_new_raw[:, 1],
        "wx": W_new[:, 0],
        "wy": W_new[:, 1],
        "extrapolation": rs.outside_mask(S_new_raw).astype(float),
    }
    for r in range(refs.shape[0]):
        h = np.sqrt(((W_new - W_ref[r]) ** 2).sum(axis=1))
        out[f"val_ref{r + 1}"] = pair_value(h)

    h_grid = np.linspace(0.0, np.sqrt(2.0), n_curve)
    curve = {"h_warped": h_grid, "value": pair_value(h_grid)}
    return out, curve


def run_config_hash(config):
    return config_hash(config)
