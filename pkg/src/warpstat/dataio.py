"""CSV data access and run configuration.

Data files are plain CSV with a header; an optional leading comment line
(``# key=value ...``) carries provenance (config hash, seed). Gaussian data
is long format (coords [, time], covariates, response [, process]); extremes
data is wide format (coords, one column per replicate). Parsing is strict:
unknown configuration keys and malformed tables are rejected, never guessed.
"""

import csv
import hashlib
import json
import os
import tempfile

import numpy as np

from .errors import ConfigurationError, DataError

CONFIG_KEYS = {
    # shared
    "model", "seed", "coords", "layers", "optimizer", "learn_rates", "init",
    # gaussian
    "backend", "family", "response", "covariates", "intercept", "time",
    "temporal_layers", "process", "neighbors", "basis",
    # extremes
    "method", "risk", "site_index", "risk_quantile", "cep_quantile",
    "pair_fraction", "mask_fraction", "standardize",
    # simulation
    "type", "n", "ds", "sigma2y", "sites", "replicates", "range",
    "smoothness", "variance", "lengthscale", "n_spectral",
    # summary
    "reference_sites",
}

MODELS = ("gauss", "maxstable", "rpareto", "simulate")

_OPTIMIZER_KEYS = {"nsteps", "nsteps_pre", "method", "tolerance"}
_LEARN_RATE_KEYS = {"warp_weights", "mobius", "dependence", "noise"}
_INIT_KEYS = {"variance", "lengthscale", "noise_variance", "range",
              "smoothness", "l_top"}
_LAYER_KEYS = {"type", "dim", "r", "steepness", "res"}


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return validate_config(raw)


def validate_config(raw):
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    unknown = set(raw) - CONFIG_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    model = raw.get("model", "gauss")
    if model not in MODELS:
        raise ConfigurationError(f"unknown model {model!r}")
    for sub, allowed in (("optimizer", _OPTIMIZER_KEYS),
                         ("learn_rates", _LEARN_RATE_KEYS),
                         ("init", _INIT_KEYS)):
        extra = set(raw.get(sub, {})) - allowed
        if extra:
            raise ConfigurationError(f"unknown {sub} keys: {sorted(extra)}")
    for layer in raw.get("layers", []) + raw.get("temporal_layers", []):
        extra = set(layer) - _LAYER_KEYS
        if extra:
            raise ConfigurationError(f"unknown layer keys: {sorted(extra)}")
        if layer.get("type") not in ("awu", "rbf", "mobius"):
            raise ConfigurationError(f"unknown layer type {layer.get('type')!r}")
    return raw


def config_hash(config):
    """Stable digest of the canonical JSON form."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


# --- CSV ------------------------------------------------------------------------


def read_table(path):
    """(meta dict, header list, columns dict of float arrays)."""
    meta = {}
    try:
        with open(path, newline="") as fh:
            first = fh.readline()
            if first.startswith("#"):
                for part in first[1:].strip().split():
                    if "=" in part:
                        k, v = part.split("=", 1)
                        meta[k] = v
            else:
                fh.seek(0)
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header:
                raise DataError(f"{path}: empty table")
            header = [h.strip() for h in header]
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise DataError(
                        f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                    )
                rows.append(row)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: no data rows")
    try:
        data = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric field: {exc}") from exc
    return meta, header, {name: data[:, j] for j, name in enumerate(header)}


def write_table(path, header, columns, meta=None):
    """Write CSV atomically with an optional leading comment line."""
    n = len(columns[0])
    for col in columns:
        if len(col) != n:
            raise DataError("ragged columns")
    dirname = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            if meta:
                fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(n):
                writer.writerow([_fmt(col[i]) for col in columns])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    return repr(float(v))


def require_columns(header, names, path=""):
    missing = [n for n in names if n not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing} (have {header})")


def load_gauss_table(config, path):
    """Long-format Gaussian data per the config's column names."""
    meta, header, cols = read_table(path)
    coords = config.get("coords", ["x", "y"])
    if len(coords) != 2:
        raise ConfigurationError("exactly two coordinate columns required")
    response = config.get("response", "z")
    covariates = list(config.get("covariates", []))
    time_col = config.get("time")
    proc_col = config.get("process")
    need = coords + ([time_col] if time_col else []) + covariates + [response] \
        + ([proc_col] if proc_col else [])
    require_columns(header, need, path)
    out = {
        "S_raw": np.column_stack([cols[c] for c in coords]),
        "z": cols[response],
        "t_raw": cols[time_col].reshape(-1, 1) if time_col else None,
        "proc": cols[proc_col].astype(np.int64) if proc_col else None,
        "meta": meta,
    }
    X = [cols[c] for c in covariates]
    if config.get("intercept", True):
        X = [np.ones(out["z"].size)] + X
    out["X"] = np.column_stack(X) if X else np.empty((out["z"].size, 0))
    if out["proc"] is not None and not np.all(np.isin(out["proc"], (1, 2))):
        raise DataError(f"{path}: process column must contain 1 or 2")
    return out


def load_wide_table(config, path):
    """Wide-format extremes data: coords plus z1..zT replicate columns."""
    meta, header, cols = read_table(path)
    coords = config.get("coords", ["x", "y"])
    require_columns(header, coords, path)
    rep_names = [h for h in header if h not in coords]
    if not rep_names:
        raise DataError(f"{path}: no replicate columns besides coordinates")
    coords_arr = np.column_stack([cols[c] for c in coords])
    fields = np.column_stack([cols[c] for c in rep_names]).T   # (T, n)
    return {"coords_raw": coords_arr, "fields": fields,
            "replicates": rep_names, "meta": meta}
