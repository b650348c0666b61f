"""Fitted-model serialization.

A fitted model is a versioned JSON document holding everything prediction
and summaries need without refitting: unit configurations with final
weights, frozen renormalization bounds, dependence parameters, trend
estimate, backend structures, the training table, and provenance (config
echo, hash, seed, loss-trace digest). Floats serialize via repr, which
round-trips bit-exactly.
"""

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .covario import CovParams, CrossCovParams, StParams, VarioParams
from .errors import ConfigurationError, DataError
from .gauss import FrkStructure, GaussData, GaussFit, GaussModelSpec, NngpStructure
from .warp import Rescaler, WarpStack

FORMAT_VERSION = 1


def _cov_to_dict(cov):
    if isinstance(cov, CovParams):
        return {"type": "cov", "variance": cov.variance,
                "lengthscale": cov.lengthscale, "family": cov.family}
    if isinstance(cov, StParams):
        return {"type": "st",
                "spatial": _cov_to_dict(cov.cov_s), "temporal": _cov_to_dict(cov.cov_t)}
    if isinstance(cov, CrossCovParams):
        return {"type": "crosscov", "variance1": cov.variance1,
                "variance2": cov.variance2, "lengthscale": cov.lengthscale,
                "rho": cov.rho, "family": cov.family}
    if isinstance(cov, VarioParams):
        return {"type": "vario", "range": cov.range_,
                "smoothness": cov.smoothness}
    raise ConfigurationError(f"unknown dependence parameter type {type(cov)}")


def _cov_from_dict(d):
    t = d["type"]
    if t == "cov":
        return CovParams(d["variance"], d["lengthscale"], d["family"])
    if t == "st":
        return StParams(_cov_from_dict(d["spatial"]), _cov_from_dict(d["temporal"]))
    if t == "crosscov":
        return CrossCovParams(d["variance1"], d["variance2"], d["lengthscale"],
                              d["rho"], d["family"])
    if t == "vario":
        return VarioParams(d["range"], d["smoothness"])
    raise ConfigurationError(f"unknown dependence parameter type {t!r}")


def _affines_to_json(affines):
    return [[[k, mn, mx] for k, mn, mx in aff] for aff in affines] \
        if affines is not None else None


def _affines_from_json(data):
    if data is None:
        return None
    return [[(int(k), float(mn), float(mx)) for k, mn, mx in aff] for aff in data]


@dataclass
class FittedModel:
    """Serialized fit: parameters, structures, provenance, training data."""

    model: str                       # gauss | maxstable | rpareto
    config: dict
    seed: int
    stack: dict                      # warp stack with final weights
    cov: dict                        # dependence parameters
    rescaler_s: dict
    affines1: list
    backend: str = None              # gauss backends
    method: str = None               # extremes methods
    noise: list = None
    beta: list = field(default_factory=list)
    beta_cov: list = field(default_factory=list)
    temporal_stack: dict = None
    stack2: dict = None
    rescaler_t: dict = None
    affines_t: list = None
    affines2: list = None
    structure: dict = None
    structure_kind: str = None       # nngp | frk
    train: dict = None
    threshold: float = None
    risk: str = None
    site_index: int = 0
    predict_latent: bool = False
    trace_digest: dict = None
    version: int = FORMAT_VERSION

    # --- reconstruction ---------------------------------------------------

    def warp_stack(self):
        return WarpStack.from_dict(self.stack)

    def spatial_rescaler(self):
        return Rescaler.from_dict(self.rescaler_s)

    def temporal_rescaler(self):
        return Rescaler.from_dict(self.rescaler_t) if self.rescaler_t else None

    def dependence_params(self):
        return _cov_from_dict(self.cov)

    def gauss_fit(self):
        """Rebuild the in-memory prediction state for a Gaussian model."""
        if self.model != "gauss":
            raise ConfigurationError(
                "prediction is implemented for Gaussian models only; "
                f"this is a {self.model} model"
            )
        cov = self.dependence_params()
        spec = GaussModelSpec(
            stack=self.warp_stack(),
            cov=cov,
            noise_variance=np.array(self.noise),
            backend=self.backend,
            temporal_stack=(WarpStack.from_dict(self.temporal_stack)
                            if self.temporal_stack else None),
            stack2=WarpStack.from_dict(self.stack2) if self.stack2 else None,
            predict_latent=self.predict_latent,
        )
        rs = self.spatial_rescaler()
        rt = self.temporal_rescaler()
        tr = self.train
        if spec.kind == "bivariate":
            proc = np.array(tr["proc"], dtype=np.int64)
            S = rs.transform(np.array(tr["S_raw"]))
            X = np.array(tr["X"]) if len(tr["X"]) else np.empty((proc.size, 0))
            z = np.array(tr["z"])
            data = tuple(
                GaussData(S=S[proc == p], z=z[proc == p],
                          X=X[proc == p] if X.size else None)
                for p in (1, 2)
            )
        else:
            data = GaussData(
                S=rs.transform(np.array(tr["S_raw"])),
                z=np.array(tr["z"]),
                X=np.array(tr["X"]).reshape(len(tr["z"]), -1),
                t=rt.transform(np.array(tr["t_raw"])) if tr.get("t_raw") else None,
            )
        structure = None
        if self.structure_kind == "nngp":
            structure = NngpStructure.from_dict(self.structure)
        elif self.structure_kind == "frk":
            structure = FrkStructure.from_dict(self.structure)
        return GaussFit(
            spec=spec,
            train=data,
            beta=np.array(self.beta),
            beta_cov=np.array(self.beta_cov).reshape(len(self.beta), len(self.beta)),
            affines1=_affines_from_json(self.affines1),
            affines_t=_affines_from_json(self.affines_t),
            affines2=_affines_from_json(self.affines2),
            structure=structure,
        )

    # --- serialization ----------------------------------------------------

    def to_json(self):
        doc = {
            "format_version": self.version,
            "model": self.model,
            "backend": self.backend,
            "method": self.method,
            "config": self.config,
            "config_hash": None,   # filled by save
            "seed": self.seed,
            "stack": self.stack,
            "temporal_stack": self.temporal_stack,
            "stack2": self.stack2,
            "cov": self.cov,
            "noise": self.noise,
            "beta": self.beta,
            "beta_cov": self.beta_cov,
            "rescaler_s": self.rescaler_s,
            "rescaler_t": self.rescaler_t,
            "affines1": _affines_to_json(self.affines1),
            "affines_t": _affines_to_json(self.affines_t),
            "affines2": _affines_to_json(self.affines2),
            "structure": self.structure,
            "structure_kind": self.structure_kind,
            "train": self.train,
            "threshold": self.threshold,
            "risk": self.risk,
            "site_index": self.site_index,
            "predict_latent": self.predict_latent,
            "trace_digest": self.trace_digest,
        }
        return doc

    @classmethod
    def from_json(cls, doc):
        if doc.get("format_version") != FORMAT_VERSION:
            raise DataError(
                f"unsupported model file version {doc.get('format_version')}"
            )
        return cls(
            model=doc["model"], backend=doc.get("backend"),
            method=doc.get("method"), config=doc["config"], seed=doc["seed"],
            stack=doc["stack"], temporal_stack=doc.get("temporal_stack"),
            stack2=doc.get("stack2"), cov=doc["cov"], noise=doc.get("noise"),
            beta=doc.get("beta", []), beta_cov=doc.get("beta_cov", []),
            rescaler_s=doc["rescaler_s"], rescaler_t=doc.get("rescaler_t"),
            affines1=_affines_from_json(doc.get("affines1")),
            affines_t=_affines_from_json(doc.get("affines_t")),
            affines2=_affines_from_json(doc.get("affines2")),
            structure=doc.get("structure"),
            structure_kind=doc.get("structure_kind"),
            train=doc.get("train"), threshold=doc.get("threshold"),
            risk=doc.get("risk"), site_index=doc.get("site_index", 0),
            predict_latent=doc.get("predict_latent", False),
            trace_digest=doc.get("trace_digest"),
        )


def save_model(model, path, config_hash=None):
    doc = model.to_json()
    doc["config_hash"] = config_hash
    text = json.dumps(doc, sort_keys=True, indent=1)
    dirname = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model file {path}: {exc}") from exc
    return FittedModel.from_json(doc)


def trace_digest(trace_csv):
    lines = trace_csv.strip().split("\n")
    final_loss = None
    if len(lines) > 1:
        final_loss = float(lines[-1].split(",")[2])
    return {
        "n_steps": len(lines) - 1,
        "final_loss": final_loss,
        "sha256": hashlib.sha256(trace_csv.encode()).hexdigest(),
    }
