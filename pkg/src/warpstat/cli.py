"""Command-line interface.

Subcommands: simulate, fit, predict, summary, score. Every output file
embeds the config hash and seed in a leading comment (CSV) or field (JSON).
Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import dataio, fitting, model_io, simulate
from .errors import ConfigurationError, DataError, NumericalError
from .gauss import score_predictions


def _parser():
    p = argparse.ArgumentParser(
        prog="warpstat",
        description="Nonstationary spatial modeling via deep coordinate warpings",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=False, data=False, model=False):
        if config:
            sp.add_argument("--config", required=True, help="JSON run config")
        if data:
            sp.add_argument("--data", required=True, help="input CSV")
        if model:
            sp.add_argument("--model", required=True, help="fitted model file")
        sp.add_argument("--out", required=True, help="output path")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--threads", type=int, default=None,
                        help="limit BLAS threads")
        sp.add_argument("--deterministic", action="store_true",
                        help="single-threaded deterministic reductions")

    common(sub.add_parser("simulate", help="generate synthetic data"),
           config=True)
    common(sub.add_parser("fit", help="fit a model to data"),
           config=True, data=True)
    common(sub.add_parser("predict", help="krige at new locations"),
           data=True, model=True)
    sp = sub.add_parser("summary", help="dependence maps at new locations")
    common(sp, data=True, model=True)
    sp.add_argument("--config", default=None,
                    help="optional config with reference_sites")
    sp = sub.add_parser("score", help="compare predictions against truth")
    sp.add_argument("--pred", required=True, help="predictions CSV")
    sp.add_argument("--truth", required=True, help="held-out truth CSV")
    sp.add_argument("--response", default="z", help="truth column name")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--threads", type=int, default=None)
    sp.add_argument("--deterministic", action="store_true")
    return p


def _limit_threads(args):
    n = 1 if args.deterministic and args.threads is None else args.threads
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=int(n))
    except ImportError:
        os.environ["OMP_NUM_THREADS"] = str(n)


def _write_json(path, doc):
    text = json.dumps(doc, sort_keys=True, indent=1)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def cmd_simulate(args):
    config = dataio.load_config(args.config)
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    table, truth = simulate.simulate_from_config(config, seed=seed)
    meta = {"config_hash": dataio.config_hash(config), "seed": seed}
    header = list(table)
    dataio.write_table(args.out, header, [np.asarray(table[h]) for h in header],
                       meta=meta)
    truth_path = os.path.splitext(args.out)[0] + "_truth.json"
    _write_json(truth_path, {"truth": truth, **meta})
    print(f"wrote {args.out} ({len(table[header[0]])} rows) and {truth_path}")
    return 0


def cmd_fit(args):
    config = dataio.load_config(args.config)
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    model_kind = config.get("model", "gauss")
    if model_kind == "gauss":
        table = dataio.load_gauss_table(config, args.data)
        model, trace_csv = fitting.fit_gaussian(config, table, seed=seed)
    elif model_kind in ("maxstable", "rpareto"):
        wide = dataio.load_wide_table(config, args.data)
        model, trace_csv = fitting.fit_extremes(config, wide, seed=seed)
    else:
        raise ConfigurationError(f"cannot fit model kind {model_kind!r}")
    chash = dataio.config_hash(config)
    model_io.save_model(model, args.out, config_hash=chash)
    trace_path = os.path.splitext(args.out)[0] + "_trace.csv"
    with open(trace_path + ".tmp", "w") as fh:
        fh.write(f"# config_hash={chash} seed={seed}\n")
        fh.write(trace_csv)
    os.replace(trace_path + ".tmp", trace_path)
    final = model.trace_digest.get("final_loss")
    print(f"wrote {args.out} (final loss {final}) and {trace_path}")
    return 0


def cmd_predict(args):
    model = model_io.load_model(args.model)
    config = model.config
    # newdata may lack the response column; parse with relaxed requirements
    table = _load_newdata(model, args.data)
    pred = fitting.predict_from_model(model, table)
    meta = {"config_hash": dataio.config_hash(config), "seed": model.seed}
    cols = {
        "x": table["S_raw"][:, 0],
        "y": table["S_raw"][:, 1],
        "mean": pred.mean,
        "stderr": pred.stderr,
        "extrapolation": pred.extrapolation.astype(float),
    }
    if table.get("t_raw") is not None:
        cols = {"x": cols["x"], "y": cols["y"],
                "t": table["t_raw"][:, 0], "mean": cols["mean"],
                "stderr": cols["stderr"], "extrapolation": cols["extrapolation"]}
    dataio.write_table(args.out, list(cols), [cols[k] for k in cols], meta=meta)
    print(f"wrote {args.out} ({pred.mean.size} rows)")
    return 0


def _load_newdata(model, path):
    """Parse prediction inputs using the fitted model's column config."""
    config = dict(model.config)
    meta, header, cols = dataio.read_table(path)
    coords = config.get("coords", ["x", "y"])
    covariates = list(config.get("covariates", []))
    time_col = config.get("time")
    proc_col = config.get("process")
    need = coords + ([time_col] if time_col and model.temporal_stack else []) \
        + covariates + ([proc_col] if proc_col and model.stack2 else [])
    dataio.require_columns(header, need, path)
    n = len(cols[coords[0]])
    X = [cols[c] for c in covariates]
    if config.get("intercept", True):
        X = [np.ones(n)] + X
    return {
        "S_raw": np.column_stack([cols[c] for c in coords]),
        "X": np.column_stack(X) if X else np.empty((n, 0)),
        "t_raw": (cols[time_col].reshape(-1, 1)
                  if time_col and model.temporal_stack else None),
        "proc": (cols[proc_col].astype(np.int64)
                 if proc_col and model.stack2 else None),
    }


def cmd_summary(args):
    model = model_io.load_model(args.model)
    _, header, cols = dataio.read_table(args.data)
    coords = model.config.get("coords", ["x", "y"])
    dataio.require_columns(header, coords, args.data)
    S_new = np.column_stack([cols[c] for c in coords])
    refs = None
    if args.config:
        extra = dataio.load_config(args.config)
        if extra.get("reference_sites"):
            refs = np.asarray(extra["reference_sites"], dtype=np.float64)
    out, curve = fitting.summary_from_model(model, S_new, reference_sites=refs)
    meta = {"config_hash": dataio.config_hash(model.config), "seed": model.seed}
    dataio.write_table(args.out, list(out), [out[k] for k in out], meta=meta)
    curve_path = os.path.splitext(args.out)[0] + "_curve.csv"
    dataio.write_table(curve_path, list(curve), [curve[k] for k in curve],
                       meta=meta)
    print(f"wrote {args.out} and {curve_path}")
    return 0


def cmd_score(args):
    pred_meta, pred_header, pred = dataio.read_table(args.pred)
    dataio.require_columns(pred_header, ["mean", "stderr"], args.pred)
    _, truth_header, truth = dataio.read_table(args.truth)
    dataio.require_columns(truth_header, [args.response], args.truth)
    if len(truth[args.response]) != len(pred["mean"]):
        raise DataError(
            f"row mismatch: {len(pred['mean'])} predictions vs "
            f"{len(truth[args.response])} truth rows"
        )
    rmspe, crps = score_predictions(pred["mean"], pred["stderr"],
                                    truth[args.response])
    doc = {"rmspe": rmspe, "crps": crps, "n": int(len(pred["mean"]))}
    # provenance travels with the prediction file
    doc.update({k: pred_meta[k] for k in ("config_hash", "seed")
                if k in pred_meta})
    _write_json(args.out, doc)
    print(json.dumps(doc))
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "summary": cmd_summary,
    "score": cmd_score,
}


def main(argv=None):
    args = _parser().parse_args(argv)
    _limit_threads(args)
    try:
        return _COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
