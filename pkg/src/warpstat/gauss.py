"""Gaussian likelihood backends, trend estimation, and kriging prediction.

Three likelihood backends share one warped-domain covariance model:

* exact: dense restricted log-likelihood with the trend integrated out;
* nngp: nearest-neighbor (Vecchia) factorization at the response level with
  the trend profiled out by generalized least squares on the whitened
  design;
* frk: low-rank basis-function model evaluated through the Woodbury
  identity, trend profiled the same way.

All losses are built on the autodiff tape; gradients reach every warp
weight, dependence parameter, and the noise variance.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.special

from . import autodiff as ad
from .covario import (
    CovParams,
    CrossCovParams,
    StParams,
    cov_iso,
    cross_cov_matrix,
    nonstat_cov_matrix,
    pairwise_dists,
    st_sep_cov_matrix,
)
from .errors import ConditioningError, ConfigurationError, DataError
from .params import Log, ParamGroup
from .warp import WarpStack

LOG_2PI = float(np.log(2.0 * np.pi))

_JITTER_REL = 1e-8
_NNGP_CHUNK = 512


@dataclass
class GaussData:
    """Observations for one Gaussian process: rescaled coords, design, response."""

    S: np.ndarray                 # (n, 2) coordinates on the working domain
    z: np.ndarray                 # (n,) responses
    X: np.ndarray = None          # (n, q) trend design, q >= 0
    t: np.ndarray = None          # (n, 1) rescaled times (spatio-temporal only)

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.float64).ravel()
        n = self.z.size
        if self.X is None:
            self.X = np.empty((n, 0))
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.t is not None:
            self.t = np.asarray(self.t, dtype=np.float64).reshape(-1, 1)
        if self.S.shape[0] != n or self.X.shape[0] != n:
            raise DataError("coordinate/design/response row counts differ")
        q = self.X.shape[1]
        if q > n:
            raise DataError(f"more covariates ({q}) than observations ({n})")
        if q > 0 and np.linalg.matrix_rank(self.X) < q:
            raise DataError("trend design matrix is rank deficient")

    @property
    def n(self):
        return self.z.size

    @property
    def q(self):
        return self.X.shape[1]


@dataclass
class GaussModelSpec:
    """Model description for the Gaussian family.

    cov is CovParams (spatial), StParams (spatio-temporal separable), or
    CrossCovParams (bivariate). noise_variance is a scalar, or a pair for
    the bivariate model. For the frk backend, CovParams holds the
    basis-weight prior (variance and lengthscale on warped center
    distances).
    """

    stack: WarpStack
    cov: object
    noise_variance: object = 0.1
    backend: str = "exact"
    temporal_stack: WarpStack = None
    stack2: WarpStack = None
    predict_latent: bool = False

    def __post_init__(self):
        if self.backend not in ("exact", "nngp", "frk"):
            raise ConfigurationError(f"unknown backend {self.backend!r}")
        noise = np.atleast_1d(np.asarray(self.noise_variance, dtype=np.float64))
        if np.any(noise <= 0):
            raise ConfigurationError("noise variance must be positive")
        self.noise_variance = noise

    @property
    def kind(self):
        if isinstance(self.cov, CrossCovParams):
            return "bivariate"
        if isinstance(self.cov, StParams):
            return "spatiotemporal"
        return "spatial"

    def param_groups(self):
        groups = list(self.stack.param_groups("warp1"))
        if self.temporal_stack is not None:
            groups += self.temporal_stack.param_groups("warpt")
        if self.stack2 is not None:
            groups += self.stack2.param_groups("warp2")
        groups += self.cov.param_groups()
        groups.append(
            ParamGroup("noise.variance", Log(), np.log(self.noise_variance),
                       role="dependence", rate_key="noise")
        )
        return groups


@dataclass
class LossValue:
    """Scalar objective with its gradient per parameter group (unconstrained scale)."""

    value: float
    gradients: dict


@dataclass
class PredictionResult:
    mean: np.ndarray
    stderr: np.ndarray
    extrapolation: np.ndarray = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        self.stderr = np.asarray(self.stderr, dtype=np.float64).ravel()
        if self.extrapolation is None:
            self.extrapolation = np.zeros(self.mean.size, dtype=bool)
        if np.any(self.stderr < 0):
            raise ConditioningError("negative predictive standard error")


# --- shared pieces -----------------------------------------------------------


def _chol_jittered(Sigma, scale):
    """Cholesky with one jitter-and-retry; raises ConditioningError after."""
    try:
        return ad.cholesky(Sigma), 0.0
    except np.linalg.LinAlgError:
        n = Sigma.shape[-1]
        jit = _JITTER_REL * max(scale, 1e-12)
        try:
            return ad.cholesky(Sigma + jit * np.eye(n)), jit
        except np.linalg.LinAlgError as exc:
            raise ConditioningError(
                f"covariance not positive definite even with jitter {jit:.3e}"
            ) from exc


def _split_natural(naturals, spec):
    """Pull warp weight nodes and dependence nodes out of the naturals dict."""
    w1 = [naturals[f"warp1.{i}.{u.kind}"] for i, u in enumerate(spec.stack.units)]
    wt = None
    if spec.temporal_stack is not None:
        wt = [naturals[f"warpt.{i}.{u.kind}"]
              for i, u in enumerate(spec.temporal_stack.units)]
    w2 = None
    if spec.stack2 is not None:
        w2 = [naturals[f"warp2.{i}.{u.kind}"]
              for i, u in enumerate(spec.stack2.units)]
    return w1, wt, w2


def _scalar(naturals, name):
    return naturals[name][0]


def _sigma_z_node(spec, data, naturals):
    """Covariance matrix of the observed vector (includes noise diagonal)."""
    w1, wt, w2 = _split_natural(naturals, spec)
    noise = naturals["noise.variance"]
    if spec.kind == "spatial":
        C = nonstat_cov_matrix(
            spec.stack, spec.cov, data.S, weights=w1,
            variance=_scalar(naturals, "cov.variance"),
            lengthscale=_scalar(naturals, "cov.lengthscale"),
        )
        n = data.n
        return C + noise[0] * np.eye(n)
    if spec.kind == "spatiotemporal":
        if data.t is None:
            raise DataError("spatio-temporal model needs a time column")
        C = st_sep_cov_matrix(
            spec.stack, spec.temporal_stack, spec.cov, data.S, data.t,
            weights_s=w1, weights_t=wt,
            variance=_scalar(naturals, "st.variance"),
            lengthscale_s=_scalar(naturals, "st.lengthscale_s"),
            lengthscale_t=_scalar(naturals, "st.lengthscale_t"),
        )
        n = data.n
        return C + noise[0] * np.eye(n)
    raise ConfigurationError("use _sigma_z_bivar for the bivariate model")


def _sigma_z_bivar(spec, datasets, naturals):
    w1, _, w2 = _split_natural(naturals, spec)
    C, _ = cross_cov_matrix(
        spec.stack, spec.stack2, spec.cov, datasets[0].S, datasets[1].S,
        weights1=w1, weights2=w2,
        variance1=_scalar(naturals, "crosscov.variance1"),
        variance2=_scalar(naturals, "crosscov.variance2"),
        lengthscale=_scalar(naturals, "crosscov.lengthscale"),
        rho=_scalar(naturals, "crosscov.rho"),
    )
    noise = naturals["noise.variance"]
    n1, n2 = datasets[0].n, datasets[1].n
    d1 = np.concatenate([np.ones(n1), np.zeros(n2)])
    d2 = np.concatenate([np.zeros(n1), np.ones(n2)])
    return C + noise[0] * np.diag(d1) + noise[1] * np.diag(d2)


def _reml_node(Sigma_Z, X, z, scale):
    """Log restricted likelihood given the observation covariance node."""
    n = z.size
    q = X.shape[1]
    L, _ = _chol_jittered(Sigma_Z, scale)
    zc = ad.constant(z.reshape(-1, 1))
    b = ad.solve_triangular(L, zc)
    ll = -0.5 * (n - q) * LOG_2PI - 0.5 * ad.logdet_chol(L)
    if q == 0:
        return ll - 0.5 * ad.sum_(ad.square(b))
    logdet_xtx = float(np.linalg.slogdet(X.T @ X)[1])
    A = ad.solve_triangular(L, ad.constant(X))
    M = ad.transpose(A) @ A
    LM, _ = _chol_jittered(M, 1.0)
    u = ad.solve_triangular(LM, ad.transpose(A) @ b)
    quad = ad.sum_(ad.square(b)) - ad.sum_(ad.square(u))
    return ll + 0.5 * logdet_xtx - 0.5 * ad.logdet_chol(LM) - 0.5 * quad


def _loss_value_from(neg_loss_node, leaves, group_names, sign=-1.0):
    """Package a node as LossValue; sign=-1 converts minimized loss to loglik."""
    grads = ad.grad(neg_loss_node, [leaves[name] for name in group_names])
    return LossValue(
        value=sign * neg_loss_node.item(),
        gradients={name: sign * g for name, g in zip(group_names, grads)},
    )


# --- exact REML --------------------------------------------------------------


class RemlObjective:
    """Negative restricted log-likelihood for exact dense fitting."""

    def __init__(self, spec, data):
        self.spec = spec
        self.data = data
        if spec.kind == "bivariate":
            if not isinstance(data, (list, tuple)) or len(data) != 2:
                raise DataError("bivariate model expects a pair of datasets")
        self.groups = spec.param_groups()

    def param_groups(self):
        return self.groups

    def loss(self, naturals):
        spec, data = self.spec, self.data
        noise = naturals["noise.variance"]
        if spec.kind == "bivariate":
            Sigma = _sigma_z_bivar(spec, data, naturals)
            X = scipy.linalg.block_diag(data[0].X, data[1].X)
            z = np.concatenate([data[0].z, data[1].z])
            scale = float(
                naturals["crosscov.variance1"].value[0]
                + naturals["crosscov.variance2"].value[0]
                + noise.value.sum()
            )
        else:
            Sigma = _sigma_z_node(spec, data, naturals)
            X, z = data.X, data.z
            var_name = "cov.variance" if spec.kind == "spatial" else "st.variance"
            scale = float(naturals[var_name].value[0] + noise.value[0])
        return -_reml_node(Sigma, X, z, scale)


def reml_loglik(spec, data):
    """Log restricted likelihood and its gradient at the spec's parameters."""
    obj = RemlObjective(spec, data)
    pv_leaves = {g.name: ad.constant(g.init_unconstrained) for g in obj.groups}
    naturals = {g.name: g.transform.apply(pv_leaves[g.name]) for g in obj.groups}
    neg = obj.loss(naturals)
    return _loss_value_from(neg, pv_leaves, [g.name for g in obj.groups])


def gls_beta(spec, data, Sigma=None):
    """Generalized least squares trend estimate and its covariance."""
    if isinstance(data, (list, tuple)):
        X = scipy.linalg.block_diag(*[d.X for d in data])
        z = np.concatenate([d.z for d in data])
    else:
        X, z = data.X, data.z
    if X.shape[1] == 0:
        return np.empty(0), np.empty((0, 0))
    if Sigma is None:
        obj = RemlObjective(spec, data)
        leaves = {g.name: ad.constant(g.init_unconstrained) for g in obj.groups}
        naturals = {g.name: g.transform.apply(leaves[g.name]) for g in obj.groups}
        if spec.kind == "bivariate":
            Sigma = _sigma_z_bivar(spec, data, naturals).value
        else:
            Sigma = _sigma_z_node(spec, data, naturals).value
    cf = scipy.linalg.cho_factor(Sigma, lower=True)
    Si_X = scipy.linalg.cho_solve(cf, X)
    M = X.T @ Si_X
    beta_cov = np.linalg.inv(M)
    beta = beta_cov @ (Si_X.T @ z)
    return beta, beta_cov


# --- nearest-neighbor (Vecchia) backend --------------------------------------


@dataclass
class NngpStructure:
    """Ordering and preceding-neighbor sets for the Vecchia factorization."""

    order: np.ndarray                      # permutation of 0..n-1
    neighbors: list = field(repr=False)    # neighbors[i]: indices into ordered seq
    m: int = 0

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=np.int64)
        self.neighbors = [np.asarray(nb, dtype=np.int64) for nb in self.neighbors]
        for i, nb in enumerate(self.neighbors):
            if nb.size and nb.max() >= i:
                raise ConfigurationError(
                    f"neighbor set of ordered point {i} must precede it"
                )

    def groups_by_count(self):
        by_k = {}
        for i, nb in enumerate(self.neighbors):
            by_k.setdefault(nb.size, []).append(i)
        return {k: np.asarray(v, dtype=np.int64) for k, v in by_k.items()}

    def to_dict(self):
        return {
            "order": self.order.tolist(),
            "neighbors": [nb.tolist() for nb in self.neighbors],
            "m": self.m,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(order=np.array(d["order"], dtype=np.int64),
                   neighbors=[np.array(nb, dtype=np.int64) for nb in d["neighbors"]],
                   m=int(d["m"]))


def build_nngp(coords, m, order_seed=None, order=None):
    """Random (or given) ordering plus nearest preceding neighbors.

    Distances are Euclidean in the raw (unwarped) coordinates; the structure
    is computed once and stays fixed while the warp evolves.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 1:
        coords = coords.reshape(-1, 1)
    n = coords.shape[0]
    if m < 1:
        raise ConfigurationError("nngp needs m >= 1 neighbors")
    if order is None:
        if order_seed is None:
            order = np.arange(n)
        else:
            order = np.random.default_rng(order_seed).permutation(n)
    order = np.asarray(order, dtype=np.int64)
    pts = coords[order]
    neighbors = [np.empty(0, dtype=np.int64)]
    for i in range(1, n):
        k = min(m, i)
        d2 = ((pts[:i] - pts[i]) ** 2).sum(axis=1)
        if k >= i:
            nb = np.argsort(d2, kind="stable")
        else:
            part = np.argpartition(d2, k - 1)[:k]
            nb = part[np.argsort(d2[part], kind="stable")]
        neighbors.append(np.sort(nb[:k]).astype(np.int64))
    return NngpStructure(order=order, neighbors=neighbors, m=int(m))


def _batched_dists(A, B=None):
    """Distances for stacked point sets: A (g,k,2) vs B (g,l,2) -> (g,k,l).

    B=None computes A against itself with an exact-zero diagonal.
    """
    same = B is None
    B = A if same else B
    r1 = ad.sum_(ad.square(A), axis=2)
    r2 = r1 if same else ad.sum_(ad.square(B), axis=2)
    G = A @ ad.transpose(B)
    k = A.shape[1]
    l = B.shape[1]
    d2 = ad.reshape(r1, (-1, k, 1)) + ad.reshape(r2, (-1, 1, l)) - 2.0 * G
    if same:
        d2 = d2 * (1.0 - np.eye(k))
    pos = d2.value > 1e-24
    d2_safe = ad.where(pos, d2, 1.0)
    return ad.where(pos, ad.sqrt(d2_safe), ad.constant(np.zeros(d2.value.shape)))


class NngpObjective:
    """Negative Vecchia log-likelihood, trend profiled via whitened GLS."""

    def __init__(self, spec, data, structure):
        if spec.kind == "bivariate":
            raise ConfigurationError("nngp backend supports univariate models only")
        self.spec = spec
        self.data = data
        self.structure = structure
        self.groups = spec.param_groups()
        # reorder data once
        o = structure.order
        self.S_ord = data.S[o]
        self.t_ord = data.t[o] if data.t is not None else None
        self.V_ord = np.column_stack([data.z[o], data.X[o]])  # response + design
        self.k_groups = structure.groups_by_count()

    def param_groups(self):
        return self.groups

    def _warped(self, naturals):
        spec = self.spec
        w1, wt, _ = _split_natural(naturals, spec)
        W, _ = spec.stack.forward(self.S_ord, weights=w1)
        if spec.kind == "spatiotemporal":
            Wt, _ = spec.temporal_stack.forward(self.t_ord, weights=wt)
            return W, Wt
        return W, None

    def _kernel_scalars(self, naturals):
        spec = self.spec
        if spec.kind == "spatial":
            return (_scalar(naturals, "cov.variance"),
                    _scalar(naturals, "cov.lengthscale"), None)
        return (_scalar(naturals, "st.variance"),
                _scalar(naturals, "st.lengthscale_s"),
                _scalar(naturals, "st.lengthscale_t"))

    def _cov_of_dists(self, hs, ht, naturals):
        spec = self.spec
        var, ell_s, ell_t = self._kernel_scalars(naturals)
        if spec.kind == "spatial":
            return cov_iso(spec.cov.family, hs, var, ell_s)
        cs = cov_iso(spec.cov.cov_s.family, hs, var, ell_s)
        ct = cov_iso(spec.cov.cov_t.family, ht, spec.cov.cov_t.variance, ell_t)
        return cs * ct

    def _whitened(self, naturals):
        """Whitened [z, X] rows and the log conditional-variance sum.

        Every conditional term (z_i | z_N, x_i | x_N) is divided by its
        conditional standard deviation, so the Vecchia log-likelihood and the
        GLS trend both read off these rows.
        """
        noise = naturals["noise.variance"][0]
        var, _, _ = self._kernel_scalars(naturals)
        W, Wt = self._warped(naturals)
        q = self.data.q

        fv_parts = []
        logd_parts = []
        for k, idx in sorted(self.k_groups.items()):
            for start in range(0, idx.size, _NNGP_CHUNK):
                ii = idx[start:start + _NNGP_CHUNK]
                g = ii.size
                Vi = self.V_ord[ii]                                   # (g, 1+q)
                if k == 0:
                    d = var + noise
                    fv_parts.append(ad.constant(Vi) / ad.sqrt(d))
                    logd_parts.append(ad.log(d) * float(g))
                    continue
                nb = np.stack([self.structure.neighbors[i] for i in ii])  # (g, k)
                Wi = ad.reshape(ad.gather_rows(W, ii), (g, 1, 2))
                Wn = ad.reshape(ad.gather_rows(W, nb.ravel()), (g, k, 2))
                hs_nn = _batched_dists(Wn)
                hs_ni = ad.reshape(_batched_dists(Wn, Wi), (g, k))
                if Wt is None:
                    ht_nn = ht_ni = None
                else:
                    Ti = ad.reshape(ad.gather_rows(Wt, ii), (g, 1, 1))
                    Tn = ad.reshape(ad.gather_rows(Wt, nb.ravel()), (g, k, 1))
                    ht_nn = _batched_dists(Tn)
                    ht_ni = ad.reshape(_batched_dists(Tn, Ti), (g, k))
                C_nn = self._cov_of_dists(hs_nn, ht_nn, naturals) + noise * np.eye(k)
                c_ni = self._cov_of_dists(hs_ni, ht_ni, naturals)
                L, _ = _chol_jittered(C_nn, float(var.value + noise.value))
                alpha = ad.solve_triangular(L, ad.reshape(c_ni, (g, k, 1)))
                d = var + noise - ad.sum_(ad.square(alpha), axis=(1, 2))
                if np.any(d.value <= 0):
                    bad = int(ii[int(np.argmax(d.value <= 0))])
                    raise ConditioningError(
                        f"nonpositive conditional variance at ordered index {bad}"
                    )
                Vn = ad.constant(self.V_ord[nb.reshape(-1)].reshape(g, k, 1 + q))
                w = ad.solve_triangular(L, Vn)                        # (g,k,1+q)
                pred = ad.reshape(ad.transpose(alpha) @ w, (g, 1 + q))
                fv_parts.append((Vi - pred) / ad.reshape(ad.sqrt(d), (g, 1)))
                logd_parts.append(ad.sum_(ad.log(d)))

        FV = ad.concat(fv_parts, axis=0)
        sum_logd = logd_parts[0]
        for p in logd_parts[1:]:
            sum_logd = sum_logd + p
        return FV, sum_logd

    def loss(self, naturals):
        n, q = self.data.n, self.data.q
        FV, sum_logd = self._whitened(naturals)
        Fz = FV[:, 0:1]
        if q == 0:
            quad = ad.sum_(ad.square(Fz))
        else:
            FX = FV[:, 1:]
            M = ad.transpose(FX) @ FX
            LM, _ = _chol_jittered(M, 1.0)
            u = ad.solve_triangular(LM, ad.transpose(FX) @ Fz)
            quad = ad.sum_(ad.square(Fz)) - ad.sum_(ad.square(u))
        return 0.5 * (n * LOG_2PI + sum_logd + quad)

    def gls_beta(self, naturals=None):
        """GLS trend coefficients through the Vecchia whitening."""
        if self.data.q == 0:
            return np.empty(0), np.empty((0, 0))
        if naturals is None:
            leaves = {g.name: ad.constant(g.init_unconstrained) for g in self.groups}
            naturals = {g.name: g.transform.apply(leaves[g.name]) for g in self.groups}
        FV, _ = self._whitened(naturals)
        Fz, FX = FV.value[:, 0], FV.value[:, 1:]
        cov = np.linalg.inv(FX.T @ FX)
        return cov @ (FX.T @ Fz), cov


def nngp_loglik(spec, data, structure):
    """Vecchia log-likelihood (trend profiled) with gradients."""
    obj = NngpObjective(spec, data, structure)
    leaves = {g.name: ad.constant(g.init_unconstrained) for g in obj.groups}
    naturals = {g.name: g.transform.apply(leaves[g.name]) for g in obj.groups}
    neg = obj.loss(naturals)
    return _loss_value_from(neg, leaves, [g.name for g in obj.groups])


# --- fixed-rank (basis function) backend --------------------------------------


@dataclass
class FrkStructure:
    """Bisquare basis grid on the warped working domain."""

    centers: np.ndarray
    aperture: float
    k_per_axis: int

    def to_dict(self):
        return {
            "centers": self.centers.tolist(),
            "aperture": self.aperture,
            "k_per_axis": self.k_per_axis,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["centers"]), float(d["aperture"]), int(d["k_per_axis"]))


def build_frk(n_obs, k_per_axis, aperture_factor=1.5):
    """k x k bisquare grid over [-0.5, 0.5]^2 with aperture = factor * spacing.

    The post-unit renormalization pins the warped domain to the unit box, so
    the grid is laid out there once. Basis count is capped at n/2.
    """
    k = int(k_per_axis)
    if k < 1:
        raise ConfigurationError("frk needs at least one basis function per axis")
    while k > 1 and k * k > n_obs // 2:
        k -= 1
    if k * k > max(n_obs // 2, 1):
        raise ConfigurationError(
            f"cannot place a basis grid under the n/2 cap with n={n_obs}"
        )
    axis = np.linspace(-0.5, 0.5, k)
    spacing = 1.0 / (k - 1) if k > 1 else 1.0
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    centers = np.column_stack([gx.ravel(), gy.ravel()])
    return FrkStructure(centers=centers, aperture=aperture_factor * spacing,
                        k_per_axis=k)


def bisquare_eval(center, aperture, w):
    """Bisquare basis value (1 - (d/aperture)^2)^2 for d <= aperture, else 0."""
    if aperture <= 0:
        raise ConfigurationError("aperture must be positive")
    d = np.linalg.norm(np.asarray(w, dtype=np.float64) -
                       np.asarray(center, dtype=np.float64))
    if d > aperture:
        return 0.0
    return float((1.0 - (d / aperture) ** 2) ** 2)


def _bisquare_matrix(W, centers, aperture):
    """Tape-built basis matrix Phi: (n, K) bisquare values at warped coords."""
    h = pairwise_dists(W, ad.constant(centers))
    inside = h.value <= aperture
    val = ad.square(1.0 - ad.square(h / aperture))
    return ad.where(inside, val, ad.constant(np.zeros(h.value.shape)))


class FrkObjective:
    """Negative low-rank Gaussian log-likelihood through the Woodbury identity."""

    def __init__(self, spec, data, structure):
        if spec.kind != "spatial":
            raise ConfigurationError("frk backend supports spatial models only")
        K = structure.centers.shape[0]
        if K > max(data.n // 2, 0) and K > 0:
            raise ConfigurationError(
                f"basis count {K} exceeds n/2 = {data.n // 2}"
            )
        self.spec = spec
        self.data = data
        self.structure = structure
        self.groups = spec.param_groups()
        if K:
            diff = structure.centers[:, None, :] - structure.centers[None, :, :]
            self.center_dists = np.sqrt((diff**2).sum(-1))
        else:
            self.center_dists = np.zeros((0, 0))

    def param_groups(self):
        return self.groups

    def _pieces(self, naturals):
        spec, data = self.spec, self.data
        w1, _, _ = _split_natural(naturals, spec)
        noise = naturals["noise.variance"][0]
        tau2 = _scalar(naturals, "cov.variance")
        ell = _scalar(naturals, "cov.lengthscale")
        K = self.structure.centers.shape[0]
        n = data.n
        if K == 0:
            return None, None, noise, n, 0
        W, _ = spec.stack.forward(data.S, weights=w1)
        Phi = _bisquare_matrix(W, self.structure.centers, self.structure.aperture)
        Sigma_eta = cov_iso(spec.cov.family, self.center_dists, tau2, ell) \
            + 1e-10 * float(tau2.value) * np.eye(K)
        L_eta, _ = _chol_jittered(Sigma_eta, float(tau2.value))
        G = Phi @ L_eta                        # (n, K); G G' = Phi Sigma_eta Phi'
        M = noise * np.eye(K) + ad.transpose(G) @ G
        LM, _ = _chol_jittered(M, float(noise.value + tau2.value))
        return G, LM, noise, n, K

    def _siginv_apply(self, V, G, LM, noise):
        """Sigma_Z^{-1} V through Woodbury for a constant or node V (n, p)."""
        V = ad.as_node(V)
        if G is None:
            return V / noise
        t = ad.transpose(G) @ V
        s = ad.solve_triangular(LM, t)
        s = ad.solve_triangular(LM, s, trans=True)
        return (V - G @ s) / noise

    def loss(self, naturals):
        data = self.data
        G, LM, noise, n, K = self._pieces(naturals)
        X, z = data.X, data.z
        q = X.shape[1]
        zc = ad.constant(z.reshape(-1, 1))
        if G is None:
            logdet = float(n) * ad.log(noise)
        else:
            logdet = float(n - K) * ad.log(noise) + ad.logdet_chol(LM)
        if q == 0:
            r = zc
        else:
            Si_X = self._siginv_apply(ad.constant(X), G, LM, noise)
            M2 = ad.constant(X.T) @ Si_X
            LM2, _ = _chol_jittered(M2, 1.0)
            rhs = ad.transpose(Si_X) @ zc
            u = ad.solve_triangular(LM2, rhs)
            u = ad.solve_triangular(LM2, u, trans=True)
            beta = u
            r = zc - ad.constant(X) @ beta
        Si_r = self._siginv_apply(r, G, LM, noise)
        quad = ad.sum_(r * Si_r)
        return 0.5 * (n * LOG_2PI + logdet + quad)


def frk_loglik(spec, data, structure):
    """Low-rank Gaussian log-likelihood (trend profiled) with gradients."""
    obj = FrkObjective(spec, data, structure)
    leaves = {g.name: ad.constant(g.init_unconstrained) for g in obj.groups}
    naturals = {g.name: g.transform.apply(leaves[g.name]) for g in obj.groups}
    neg = obj.loss(naturals)
    return _loss_value_from(neg, leaves, [g.name for g in obj.groups])


def frk_gls_beta(obj, naturals=None):
    """GLS trend estimate under the low-rank covariance (plain numpy)."""
    data = obj.data
    if data.q == 0:
        return np.empty(0), np.empty((0, 0))
    if naturals is None:
        leaves = {g.name: ad.constant(g.init_unconstrained) for g in obj.groups}
        naturals = {g.name: g.transform.apply(leaves[g.name]) for g in obj.groups}
    G, LM, noise, _, _ = obj._pieces(naturals)
    Si_X = obj._siginv_apply(ad.constant(data.X), G, LM, noise).value
    cov = np.linalg.inv(data.X.T @ Si_X)
    return cov @ (Si_X.T @ data.z), cov


# --- prediction ----------------------------------------------------------------


@dataclass
class GaussFit:
    """Everything kriging needs: spec with final parameters, training data,
    trend estimate, frozen warp renormalizations, and backend structure."""

    spec: GaussModelSpec
    train: object                      # GaussData or (GaussData, GaussData)
    beta: np.ndarray
    beta_cov: np.ndarray
    affines1: list
    affines_t: list = None
    affines2: list = None
    structure: object = None


def _krig_core(C, c0, prior_var, X, z, beta, beta_cov, x0):
    """Universal-kriging mean and variance given dense pieces (plain numpy)."""
    L = np.linalg.cholesky(C)
    resid = z - (X @ beta if X.shape[1] else 0.0)
    b = scipy.linalg.solve_triangular(L, resid, lower=True)
    B = scipy.linalg.solve_triangular(L, c0, lower=True)
    mean = B.T @ b
    var = prior_var - (B**2).sum(axis=0)
    if X.shape[1]:
        A = scipy.linalg.solve_triangular(L, X, lower=True)
        T0 = x0.T - A.T @ B
        mean = mean + x0 @ beta
        var = var + np.einsum("qn,qp,pn->n", T0, beta_cov, T0)
    return mean, np.sqrt(np.maximum(var, 0.0))


def _dense_sigma_and_cross(fit, S_new, t_new, proc_new):
    """Training covariance, cross-covariance and prior variance (values)."""
    spec, train = fit.spec, fit.train
    if spec.kind == "spatial":
        C = nonstat_cov_matrix(spec.stack, spec.cov, train.S,
                               frozen_affines=fit.affines1).value
        c0 = nonstat_cov_matrix(spec.stack, spec.cov, train.S, S_new,
                                frozen_affines=fit.affines1).value
        C = C + spec.noise_variance[0] * np.eye(train.n)
        prior = np.full(S_new.shape[0], spec.cov.variance)
        return C, c0, prior
    if spec.kind == "spatiotemporal":
        C = st_sep_cov_matrix(spec.stack, spec.temporal_stack, spec.cov,
                              train.S, train.t,
                              frozen_affines_s=fit.affines1,
                              frozen_affines_t=fit.affines_t).value
        c0 = st_sep_cov_matrix(spec.stack, spec.temporal_stack, spec.cov,
                               train.S, train.t, S_new, t_new,
                               frozen_affines_s=fit.affines1,
                               frozen_affines_t=fit.affines_t).value
        C = C + spec.noise_variance[0] * np.eye(train.n)
        prior = np.full(S_new.shape[0],
                        spec.cov.cov_s.variance * spec.cov.cov_t.variance)
        return C, c0, prior
    # bivariate: joint training covariance, cross block per requested process
    d1, d2 = train
    cc = spec.cov
    Cjoint, _ = cross_cov_matrix(spec.stack, spec.stack2, cc, d1.S, d2.S,
                                 frozen_affines1=fit.affines1,
                                 frozen_affines2=fit.affines2)
    C = Cjoint.value.copy()
    C[:d1.n, :d1.n] += spec.noise_variance[0] * np.eye(d1.n)
    C[d1.n:, d1.n:] += spec.noise_variance[-1] * np.eye(d2.n)

    W1, _ = spec.stack.forward(d1.S, frozen_affines=fit.affines1)
    W2, _ = spec.stack2.forward(d2.S, frozen_affines=fit.affines2)
    n0 = S_new.shape[0]
    c0 = np.zeros((d1.n + d2.n, n0))
    prior = np.zeros(n0)
    for p, stack, aff in ((1, spec.stack, fit.affines1),
                          (2, spec.stack2, fit.affines2)):
        cols = np.where(proc_new == p)[0]
        if cols.size == 0:
            continue
        Wn, _ = stack.forward(S_new[cols], frozen_affines=aff)
        h1 = pairwise_dists(W1, Wn).value
        h2 = pairwise_dists(W2, Wn).value
        amp = cc.rho * np.sqrt(cc.variance1 * cc.variance2)
        vp = cc.variance1 if p == 1 else cc.variance2
        corr1 = cov_iso(cc.family, h1, 1.0, cc.lengthscale).value
        corr2 = cov_iso(cc.family, h2, 1.0, cc.lengthscale).value
        c0[:d1.n, cols] = (vp if p == 1 else amp) * corr1
        c0[d1.n:, cols] = (vp if p == 2 else amp) * corr2
        prior[cols] = vp
    return C, c0, prior


def predict_gp(fit, S_new, X_new=None, t_new=None, proc_new=None,
               extrapolation=None, latent=None):
    """Kriging prediction at new (already rescaled) locations.

    Returns the universal-kriging mean and standard error; the variance
    includes trend-estimation uncertainty. By default the standard error
    targets the noisy response; latent=True (or spec.predict_latent) targets
    the denoised process.
    """
    spec = fit.spec
    S_new = np.asarray(S_new, dtype=np.float64)
    n0 = S_new.shape[0]
    if X_new is None:
        X_new = np.empty((n0, 0))
    X_new = np.asarray(X_new, dtype=np.float64)
    if latent is None:
        latent = spec.predict_latent
    train = fit.train

    if spec.kind == "bivariate":
        if proc_new is None:
            raise DataError("bivariate prediction needs a process index per row")
        proc_new = np.asarray(proc_new, dtype=np.int64)
        q1, q2 = train[0].q, train[1].q
        if X_new.shape[1] != max(q1, q2) and X_new.shape[1] not in (q1, q2):
            raise DataError("covariate columns do not match the fitted trend")
        C, c0, prior = _dense_sigma_and_cross(fit, S_new, None, proc_new)
        if not latent:
            prior = prior + np.where(proc_new == 1, spec.noise_variance[0],
                                     spec.noise_variance[-1])
        X = scipy.linalg.block_diag(train[0].X, train[1].X)
        z = np.concatenate([train[0].z, train[1].z])
        x0 = np.zeros((n0, q1 + q2))
        for j in range(n0):
            if proc_new[j] == 1:
                x0[j, :q1] = X_new[j, :q1]
            else:
                x0[j, q1:] = X_new[j, :q2]
        mean, stderr = _krig_core(C, c0, prior, X, z, fit.beta, fit.beta_cov, x0)
        return PredictionResult(mean, stderr, extrapolation)

    if X_new.shape[1] != train.q:
        raise DataError(
            f"covariate columns ({X_new.shape[1]}) do not match the fitted trend ({train.q})"
        )

    if spec.backend == "exact":
        C, c0, prior = _dense_sigma_and_cross(fit, S_new, t_new, None)
        if not latent:
            prior = prior + spec.noise_variance[0]
        mean, stderr = _krig_core(C, c0, prior, train.X, train.z,
                                  fit.beta, fit.beta_cov, X_new)
        return PredictionResult(mean, stderr, extrapolation)

    if spec.backend == "nngp":
        return _predict_nngp(fit, S_new, X_new, t_new, latent, extrapolation)

    return _predict_frk(fit, S_new, X_new, latent, extrapolation)


def _predict_nngp(fit, S_new, X_new, t_new, latent, extrapolation):
    """Local kriging on the m nearest training sites of each new location."""
    spec, train = fit.spec, fit.train
    m = min(fit.structure.m, train.n)
    noise = spec.noise_variance[0]

    coords_tr = train.S if train.t is None else np.column_stack([train.S, train.t])
    coords_new = S_new if t_new is None else np.column_stack([S_new, t_new])
    n0 = coords_new.shape[0]

    if spec.kind == "spatial":
        prior_var = spec.cov.variance
    else:
        prior_var = spec.cov.cov_s.variance * spec.cov.cov_t.variance

    # warped training/new coordinates under the frozen maps
    Wtr, _ = spec.stack.forward(train.S, frozen_affines=fit.affines1)
    Wnew, _ = spec.stack.forward(S_new, frozen_affines=fit.affines1)
    Wtr, Wnew = Wtr.value, Wnew.value
    if train.t is not None:
        Ttr, _ = spec.temporal_stack.forward(train.t, frozen_affines=fit.affines_t)
        Tnew, _ = spec.temporal_stack.forward(t_new, frozen_affines=fit.affines_t)
        Ttr, Tnew = Ttr.value, Tnew.value

    def kernel_np(h_s, h_t):
        if spec.kind == "spatial":
            return cov_iso(spec.cov.family, h_s, spec.cov.variance,
                           spec.cov.lengthscale).value
        cs = cov_iso(spec.cov.cov_s.family, h_s, spec.cov.cov_s.variance,
                     spec.cov.cov_s.lengthscale).value
        ct = cov_iso(spec.cov.cov_t.family, h_t, spec.cov.cov_t.variance,
                     spec.cov.cov_t.lengthscale).value
        return cs * ct

    mean = np.empty(n0)
    var = np.empty(n0)
    resid = train.z - (train.X @ fit.beta if train.q else 0.0)
    for start in range(0, n0, _NNGP_CHUNK):
        sl = slice(start, min(start + _NNGP_CHUNK, n0))
        d2 = ((coords_new[sl, None, :] - coords_tr[None, :, :]) ** 2).sum(-1)
        nb = np.argpartition(d2, m - 1, axis=1)[:, :m] if m < train.n else \
            np.tile(np.arange(train.n), (d2.shape[0], 1))
        g = nb.shape[0]
        Wn = Wtr[nb]                                   # (g, m, 2)
        hs_nn = np.sqrt(np.maximum(
            (Wn[:, :, None, :] - Wn[:, None, :, :]) ** 2, 0).sum(-1))
        hs_ni = np.sqrt(((Wn - Wnew[sl][:, None, :]) ** 2).sum(-1))
        if train.t is None:
            ht_nn = ht_ni = None
        else:
            Tn = Ttr[nb]
            ht_nn = np.abs(Tn[:, :, None, 0] - Tn[:, None, :, 0])
            ht_ni = np.abs(Tn[:, :, 0] - Tnew[sl][:, None, 0])
        C_nn = kernel_np(hs_nn, ht_nn) + noise * np.eye(m)
        c_ni = kernel_np(hs_ni, ht_ni)
        L = np.linalg.cholesky(C_nn)
        alpha = np.linalg.solve(L, c_ni[:, :, None])
        rn = np.linalg.solve(L, resid[nb][:, :, None])
        mean[sl] = (alpha[:, :, 0] * rn[:, :, 0]).sum(axis=1)
        var[sl] = prior_var - (alpha[:, :, 0] ** 2).sum(axis=1)
        if train.q:
            Xn = np.linalg.solve(L, train.X[nb])
            t0 = X_new[sl].T - np.einsum("gk,gkq->qg", alpha[:, :, 0], Xn)
            mean[sl] += X_new[sl] @ fit.beta
            var[sl] += np.einsum("qg,qp,pg->g", t0, fit.beta_cov, t0)
    if not latent:
        var = var + noise
    return PredictionResult(mean, np.sqrt(np.maximum(var, 0.0)), extrapolation)


def _predict_frk(fit, S_new, X_new, latent, extrapolation):
    """Low-rank posterior prediction: basis-weight posterior plus trend term."""
    spec, train = fit.spec, fit.train
    st = fit.structure
    noise = spec.noise_variance[0]
    K = st.centers.shape[0]
    Wtr, _ = spec.stack.forward(train.S, frozen_affines=fit.affines1)
    Wnew, _ = spec.stack.forward(S_new, frozen_affines=fit.affines1)
    Phi = _bisquare_matrix(ad.constant(Wtr.value), st.centers, st.aperture).value
    Phi0 = _bisquare_matrix(ad.constant(Wnew.value), st.centers, st.aperture).value

    dc = st.centers[:, None, :] - st.centers[None, :, :]
    Dc = np.sqrt((dc**2).sum(-1))
    Sigma_eta = cov_iso(spec.cov.family, Dc, spec.cov.variance,
                        spec.cov.lengthscale).value + 1e-10 * spec.cov.variance * np.eye(K)

    resid = train.z - (train.X @ fit.beta if train.q else 0.0)
    P = np.linalg.inv(Sigma_eta) + Phi.T @ Phi / noise
    cfP = scipy.linalg.cho_factor(P, lower=True)
    V_eta = scipy.linalg.cho_solve(cfP, np.eye(K))
    mu_eta = scipy.linalg.cho_solve(cfP, Phi.T @ resid / noise)

    mean = Phi0 @ mu_eta
    var = np.einsum("nk,kl,nl->n", Phi0, V_eta, Phi0)
    if train.q:
        # trend uncertainty through Sigma^{-1} X (Woodbury)
        Si_X = (train.X - Phi @ scipy.linalg.cho_solve(
            cfP, Phi.T @ train.X / noise)) / noise
        c0 = Phi @ Sigma_eta @ Phi0.T
        t0 = X_new.T - Si_X.T @ c0
        mean = mean + X_new @ fit.beta
        var = var + np.einsum("qn,qp,pn->n", t0, fit.beta_cov, t0)
    if not latent:
        var = var + noise
    return PredictionResult(mean, np.sqrt(np.maximum(var, 0.0)), extrapolation)


# --- scoring ------------------------------------------------------------------


def score_predictions(mean, stderr, truth):
    """(RMSPE, mean CRPS) under the Gaussian predictive distribution."""
    mean = np.asarray(mean, dtype=np.float64).ravel()
    stderr = np.asarray(stderr, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if not (mean.size == stderr.size == truth.size):
        raise DataError("prediction/truth lengths differ")
    resid = truth - mean
    rmspe = float(np.sqrt(np.mean(resid**2)))
    crps = np.empty_like(resid)
    pos = stderr > 0
    if pos.any():
        zz = resid[pos] / stderr[pos]
        Phi = 0.5 * (1.0 + scipy.special.erf(zz / np.sqrt(2.0)))
        phi = np.exp(-0.5 * zz**2) / np.sqrt(2 * np.pi)
        crps[pos] = stderr[pos] * (
            zz * (2 * Phi - 1.0) + 2 * phi - 1.0 / np.sqrt(np.pi)
        )
    crps[~pos] = np.abs(resid[~pos])
    return rmspe, float(np.mean(crps))

