"""Stationary covariance and semivariogram families and their warped lifts.

The nonstationary models in this package are always "stationary model on
warped coordinates": every function here takes Euclidean distances computed
after passing coordinates through a warp stack. Parameters may be plain
floats or autodiff nodes; all formulas are tape-compatible.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError
from .params import Log, ParamGroup, ScaledSigmoid, Tanh

SQRT3 = float(np.sqrt(3.0))

COV_FAMILIES = ("exponential", "matern32")

# squared distances at or below this are treated as coincident points
_SQDIST_FLOOR = 1e-24


def _as_float_or_node(x):
    return x if isinstance(x, ad.Node) else float(x)


@dataclass
class CovParams:
    """Stationary isotropic covariance parameters on the warped domain."""

    variance: float = 1.0
    lengthscale: float = 1.0
    family: str = "exponential"

    def __post_init__(self):
        if self.family not in COV_FAMILIES:
            raise ConfigurationError(f"unknown covariance family {self.family!r}")
        if self.variance <= 0 or self.lengthscale <= 0:
            raise ConfigurationError("variance and lengthscale must be positive")

    def param_groups(self, prefix="cov"):
        return [
            ParamGroup(f"{prefix}.variance", Log(), np.log([self.variance]),
                       role="dependence", rate_key="dependence"),
            ParamGroup(f"{prefix}.lengthscale", Log(), np.log([self.lengthscale]),
                       role="dependence", rate_key="dependence"),
        ]


@dataclass
class VarioParams:
    """Power semivariogram (h / range)^smoothness, smoothness in (0, 2]."""

    range_: float = 1.0
    smoothness: float = 1.0

    def __post_init__(self):
        if self.range_ <= 0:
            raise ConfigurationError("variogram range must be positive")
        if not 0 < self.smoothness <= 2:
            raise ConfigurationError("variogram smoothness must lie in (0, 2]")

    def param_groups(self, prefix="vario"):
        return [
            ParamGroup(f"{prefix}.range", Log(), np.log([self.range_]),
                       role="dependence", rate_key="dependence"),
            ParamGroup(f"{prefix}.smoothness", ScaledSigmoid(2.0),
                       ScaledSigmoid(2.0).invert([self.smoothness]),
                       role="dependence", rate_key="dependence"),
        ]


@dataclass
class CrossCovParams:
    """Bivariate model: per-process variances, one shared correlation.

    The shared correlation function (single family and lengthscale across
    all blocks) makes the joint model valid for any |rho| < 1: it is the
    intrinsic-correlation construction evaluated at per-process warped
    coordinates.
    """

    variance1: float = 1.0
    variance2: float = 1.0
    lengthscale: float = 1.0
    rho: float = 0.0
    family: str = "exponential"

    def __post_init__(self):
        if self.family not in COV_FAMILIES:
            raise ConfigurationError(f"unknown covariance family {self.family!r}")
        if min(self.variance1, self.variance2, self.lengthscale) <= 0:
            raise ConfigurationError("variances and lengthscale must be positive")
        if not -1 < self.rho < 1:
            raise ConfigurationError("cross-correlation must lie in (-1, 1)")

    def params_for(self, p):
        if p == 1:
            return CovParams(self.variance1, self.lengthscale, self.family)
        if p == 2:
            return CovParams(self.variance2, self.lengthscale, self.family)
        raise ConfigurationError(f"process index must be 1 or 2, got {p}")

    def param_groups(self, prefix="crosscov"):
        return [
            ParamGroup(f"{prefix}.variance1", Log(), np.log([self.variance1]),
                       role="dependence", rate_key="dependence"),
            ParamGroup(f"{prefix}.variance2", Log(), np.log([self.variance2]),
                       role="dependence", rate_key="dependence"),
            ParamGroup(f"{prefix}.lengthscale", Log(), np.log([self.lengthscale]),
                       role="dependence", rate_key="dependence"),
            ParamGroup(f"{prefix}.rho", Tanh(), Tanh().invert([self.rho]),
                       role="dependence", rate_key="dependence"),
        ]


@dataclass
class StParams:
    """Separable spatio-temporal model: spatial times temporal covariance.

    Only the product of the two variances is identified; fitting therefore
    trains the spatial variance and freezes the temporal one at 1.
    """

    cov_s: CovParams = None
    cov_t: CovParams = None

    def __post_init__(self):
        if self.cov_s is None:
            self.cov_s = CovParams()
        if self.cov_t is None:
            self.cov_t = CovParams()

    def param_groups(self, prefix="st"):
        return [
            ParamGroup(f"{prefix}.variance", Log(), np.log([self.cov_s.variance]),
                       role="dependence", rate_key="dependence"),
            ParamGroup(f"{prefix}.lengthscale_s", Log(),
                       np.log([self.cov_s.lengthscale]),
                       role="dependence", rate_key="dependence"),
            ParamGroup(f"{prefix}.lengthscale_t", Log(),
                       np.log([self.cov_t.lengthscale]),
                       role="dependence", rate_key="dependence"),
        ]


# --- isotropic kernels ------------------------------------------------------


def cov_iso(family, h, variance, lengthscale):
    """Stationary isotropic covariance at distances h >= 0."""
    if not isinstance(h, ad.Node):
        h = np.asarray(h, dtype=np.float64)
        if np.any(h < 0):
            raise ConfigurationError("distances must be nonnegative")
        h = ad.constant(h)
    variance = _as_float_or_node(variance)
    lengthscale = _as_float_or_node(lengthscale)
    scaled = h / lengthscale
    if family == "exponential":
        return variance * ad.exp(-scaled)
    if family == "matern32":
        s3 = SQRT3 * scaled
        return variance * (1.0 + s3) * ad.exp(-s3)
    raise ConfigurationError(f"unknown covariance family {family!r}")


def vario_power(h, range_, smoothness):
    """Power semivariogram (h / range)^smoothness with gamma(0) = 0 exactly."""
    if not isinstance(h, ad.Node):
        h = np.asarray(h, dtype=np.float64)
        if np.any(h < 0):
            raise ConfigurationError("distances must be nonnegative")
        h = ad.constant(h)
    range_ = _as_float_or_node(range_)
    smoothness = _as_float_or_node(smoothness)
    pos = h.value > 0
    h_safe = ad.where(pos, h, 1.0)
    gamma = ad.powxy(h_safe / range_, smoothness)
    return ad.where(pos, gamma, ad.constant(np.zeros(h.value.shape)))


# --- pairwise distances on the tape ----------------------------------------


def pairwise_dists(W1, W2=None):
    """Euclidean distance matrix between warped point sets (tape-safe at 0).

    When W2 is None the matrix is W1 against itself with an exactly-zero,
    gradient-free diagonal (coincident points carry no distance gradient).
    """
    W1 = ad.as_node(W1)
    same = W2 is None
    W2 = W1 if same else ad.as_node(W2)
    r1 = ad.sum_(ad.square(W1), axis=1)
    r2 = r1 if same else ad.sum_(ad.square(W2), axis=1)
    G = W1 @ ad.transpose(W2)
    d2 = ad.reshape(r1, (-1, 1)) + ad.reshape(r2, (1, -1)) - 2.0 * G
    if same:
        n = W1.shape[0]
        off_diag = 1.0 - np.eye(n)
        d2 = d2 * off_diag
    pos = d2.value > _SQDIST_FLOOR
    d2_safe = ad.where(pos, d2, 1.0)
    return ad.where(pos, ad.sqrt(d2_safe), ad.constant(np.zeros(d2.value.shape)))


# --- nonstationary lifts -----------------------------------------------------


def nonstat_cov_matrix(stack, params, S1, S2=None, *, weights=None,
                       frozen_affines=None, variance=None, lengthscale=None):
    """Covariance matrix of the warped-domain stationary model.

    Entry (i, j) = C_iso(||f(S1_i) - f(S2_j)||). S1 is the reference set for
    renormalization unless frozen affines are supplied. variance/lengthscale
    override the values in ``params`` (used to pass tape nodes during
    fitting).
    """
    W1, aff = stack.forward(S1, weights=weights, frozen_affines=frozen_affines)
    W2 = None
    if S2 is not None and S2 is not S1:
        W2, _ = stack.forward(S2, weights=weights, frozen_affines=aff)
    h = pairwise_dists(W1, W2)
    return cov_iso(
        params.family,
        h,
        params.variance if variance is None else variance,
        params.lengthscale if lengthscale is None else lengthscale,
    )


def nonstat_vario_matrix(stack, params, S1, S2=None, *, weights=None,
                         frozen_affines=None, range_=None, smoothness=None):
    """Semivariogram matrix of the warped-domain power model."""
    W1, aff = stack.forward(S1, weights=weights, frozen_affines=frozen_affines)
    W2 = None
    if S2 is not None and S2 is not S1:
        W2, _ = stack.forward(S2, weights=weights, frozen_affines=aff)
    h = pairwise_dists(W1, W2)
    return vario_power(
        h,
        params.range_ if range_ is None else range_,
        params.smoothness if smoothness is None else smoothness,
    )


def nonstat_vario(stack, params, s1, s2, **kw):
    """Semivariogram between two single sites (scalar)."""
    S = np.vstack([np.asarray(s1, dtype=np.float64),
                   np.asarray(s2, dtype=np.float64)])
    gamma = nonstat_vario_matrix(stack, params, S, **kw)
    return gamma[0, 1]


def st_sep_cov_matrix(spatial_stack, temporal_stack, st_params, S1, t1,
                      S2=None, t2=None, *, weights_s=None, weights_t=None,
                      frozen_affines_s=None, frozen_affines_t=None,
                      variance=None, lengthscale_s=None, lengthscale_t=None):
    """Separable spatio-temporal covariance: C_S(warped space) * C_T(warped time)."""
    Ws1, aff_s = spatial_stack.forward(S1, weights=weights_s,
                                       frozen_affines=frozen_affines_s)
    Wt1, aff_t = temporal_stack.forward(t1, weights=weights_t,
                                        frozen_affines=frozen_affines_t)
    Ws2 = Wt2 = None
    if S2 is not None and S2 is not S1:
        Ws2, _ = spatial_stack.forward(S2, weights=weights_s, frozen_affines=aff_s)
        Wt2, _ = temporal_stack.forward(t2, weights=weights_t, frozen_affines=aff_t)
    hs = pairwise_dists(Ws1, Ws2)
    ht = pairwise_dists(Wt1, Wt2)
    cs = cov_iso(
        st_params.cov_s.family, hs,
        st_params.cov_s.variance if variance is None else variance,
        st_params.cov_s.lengthscale if lengthscale_s is None else lengthscale_s,
    )
    ct = cov_iso(
        st_params.cov_t.family, ht,
        st_params.cov_t.variance,
        st_params.cov_t.lengthscale if lengthscale_t is None else lengthscale_t,
    )
    return cs * ct


def st_sep_cov(spatial_stack, temporal_stack, st_params, s1, t1, s2, t2, **kw):
    """Scalar separable spatio-temporal covariance between two points."""
    S = np.vstack([np.asarray(s1, dtype=np.float64),
                   np.asarray(s2, dtype=np.float64)])
    T = np.array([[float(np.asarray(t1).squeeze())],
                  [float(np.asarray(t2).squeeze())]])
    C = st_sep_cov_matrix(spatial_stack, temporal_stack, st_params, S, T, **kw)
    return C[0, 1]


def cross_cov_matrix(stack1, stack2, params, S1, S2, *, weights1=None,
                     weights2=None, frozen_affines1=None, frozen_affines2=None,
                     variance1=None, variance2=None, lengthscale=None, rho=None):
    """Joint covariance of the bivariate model over stacked coordinates.

    Returns the (n1 + n2) x (n1 + n2) matrix with within-process blocks on
    the diagonal and the shared-correlation cross block elsewhere.
    """
    v1 = params.variance1 if variance1 is None else variance1
    v2 = params.variance2 if variance2 is None else variance2
    ell = params.lengthscale if lengthscale is None else lengthscale
    rho_ = params.rho if rho is None else rho

    W1, aff1 = stack1.forward(S1, weights=weights1, frozen_affines=frozen_affines1)
    W2, aff2 = stack2.forward(S2, weights=weights2, frozen_affines=frozen_affines2)

    c11 = cov_iso(params.family, pairwise_dists(W1), v1, ell)
    c22 = cov_iso(params.family, pairwise_dists(W2), v2, ell)
    rho_corr = cov_iso(params.family, pairwise_dists(W1, W2), 1.0, ell)
    amp = rho_ * ad.sqrt(ad.as_node(v1) * ad.as_node(v2))
    c12 = amp * rho_corr
    top = ad.concat([c11, c12], axis=1)
    bottom = ad.concat([ad.transpose(c12), c22], axis=1)
    return ad.concat([top, bottom], axis=0), (aff1, aff2)


def cross_cov(stack1, stack2, params, p1, p2, s1, s2, **kw):
    """Scalar cross-covariance between process p1 at s1 and p2 at s2."""
    if p1 not in (1, 2) or p2 not in (1, 2):
        raise ConfigurationError("process indices must be 1 or 2")
    s1 = np.asarray(s1, dtype=np.float64).reshape(1, -1)
    s2 = np.asarray(s2, dtype=np.float64).reshape(1, -1)
    stacks = {1: stack1, 2: stack2}
    W1, _ = stacks[p1].forward(s1, frozen_affines=kw.get("frozen_affines1"))
    W2, _ = stacks[p2].forward(s2, frozen_affines=kw.get("frozen_affines2"))
    h = pairwise_dists(W1, W2)
    if p1 == p2:
        pp = params.params_for(p1)
        return cov_iso(params.family, h, pp.variance, pp.lengthscale)[0, 0]
    amp = params.rho * np.sqrt(params.variance1 * params.variance2)
    return (amp * cov_iso(params.family, h, 1.0, params.lengthscale))[0, 0]
