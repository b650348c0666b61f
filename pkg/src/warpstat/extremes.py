"""Max-stable and r-Pareto machinery on warped coordinates.

Implements the Brown-Resnick dependence family: the bivariate exponent
function and its partial derivatives, pairwise densities, extremal
coefficients and conditional exceedance probabilities, and four fitting
objectives (weighted least squares, pairwise composite likelihood,
randomized pairwise likelihood, gradient score matching). A truncated
spectral simulator and an exact site-conditioned Pareto simulator are
provided as test utilities.

Throughout, the dependence between two sites is the power semivariogram of
their warped distance; every objective is differentiable in the warp
weights and variogram parameters.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.special
import scipy.stats

from . import autodiff as ad
from .covario import VarioParams, nonstat_vario_matrix, pairwise_dists, vario_power
from .errors import ConditioningError, ConfigurationError, DataError
from .gauss import LossValue, _chol_jittered
from .warp import WarpStack

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
_DENSITY_FLOOR = 1e-300

RISKS = ("max", "sum", "site")
METHODS = ("wls", "pcl", "rpl", "gsm")


# --- datasets ----------------------------------------------------------------


def _np_norm_cdf(x):
    # ndtr keeps full relative precision in the lower tail (log-densities)
    return scipy.special.ndtr(np.asarray(x, dtype=np.float64))


def _np_norm_pdf(x):
    return np.exp(-0.5 * np.asarray(x) ** 2) / np.sqrt(2 * np.pi)


@dataclass
class MaximaDataset:
    """Block maxima on the unit Frechet scale: replicates are rows."""

    coords: np.ndarray            # (n, 2) rescaled coordinates
    maxima: np.ndarray            # (T, n), all entries > 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.maxima = np.asarray(self.maxima, dtype=np.float64)
        if self.maxima.ndim != 2 or self.maxima.shape[1] != self.coords.shape[0]:
            raise DataError("maxima must be (replicates x sites)")
        if np.any(self.maxima <= 0):
            raise DataError("unit Frechet maxima must be positive")

    @property
    def n_sites(self):
        return self.coords.shape[0]

    @property
    def n_reps(self):
        return self.maxima.shape[0]


def risk_eval(risk, x, site_index=0):
    """Homogeneous risk functional: max, sum, or single-site value."""
    x = np.asarray(x, dtype=np.float64)
    if risk == "max":
        return float(np.max(x))
    if risk == "sum":
        return float(np.sum(x))
    if risk == "site":
        if not 0 <= site_index < x.size:
            raise ConfigurationError(f"site index {site_index} out of range")
        return float(x[site_index])
    raise ConfigurationError(f"unknown risk functional {risk!r}")


def _risk_rows(risk, X, site_index=0):
    X = np.asarray(X, dtype=np.float64)
    if risk == "max":
        return X.max(axis=1)
    if risk == "sum":
        return X.sum(axis=1)
    if risk == "site":
        if not 0 <= site_index < X.shape[1]:
            raise ConfigurationError(f"site index {site_index} out of range")
        return X[:, site_index]
    raise ConfigurationError(f"unknown risk functional {risk!r}")


@dataclass
class ExceedanceDataset:
    """Standardized fields on the unit Pareto scale with an r-exceedance mask."""

    coords: np.ndarray            # (n, 2) rescaled coordinates
    fields: np.ndarray            # (T, n) standardized observations
    threshold: float              # u > 1
    risk: str = "max"
    site_index: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.fields = np.asarray(self.fields, dtype=np.float64)
        if self.fields.ndim != 2 or self.fields.shape[1] != self.coords.shape[0]:
            raise DataError("fields must be (replicates x sites)")
        if self.threshold <= 1:
            raise ConfigurationError("threshold must exceed 1 on the Pareto scale")
        if self.risk not in RISKS:
            raise ConfigurationError(f"unknown risk functional {self.risk!r}")
        r = _risk_rows(self.risk, self.fields / self.threshold, self.site_index)
        self.retained = r >= 1.0
        if np.any(self.fields[self.retained] <= 0):
            raise DataError("retained events must have positive entries")

    @property
    def events(self):
        """Scaled retained events x_t / u, shape (E, n)."""
        return self.fields[self.retained] / self.threshold

    @property
    def n_sites(self):
        return self.coords.shape[0]


def frechet_standardize(raw, scale="frechet"):
    """Empirical-rank transform of each column to a standard heavy-tail scale.

    scale="frechet": z = -1/log(rank/(T+1)), for block maxima.
    scale="pareto":  x = (T+1)/(T+1-rank), for threshold exceedances.
    Ties get average ranks; a constant column is degenerate.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise DataError("expected a (replicates x sites) matrix")
    T = raw.shape[0]
    if T < 20:
        warnings.warn(f"only {T} replicates per site; rank transform is crude",
                      stacklevel=2)
    out = np.empty_like(raw)
    for j in range(raw.shape[1]):
        col = raw[:, j]
        if np.ptp(col) == 0:
            raise DataError(f"degenerate margin: column {j} is constant")
        ranks = scipy.stats.rankdata(col, method="average")
        if scale == "frechet":
            out[:, j] = -1.0 / np.log(ranks / (T + 1.0))
        elif scale == "pareto":
            out[:, j] = (T + 1.0) / (T + 1.0 - ranks)
        else:
            raise ConfigurationError(f"unknown margin scale {scale!r}")
    return out


@dataclass
class PairSet:
    """Site pairs entering a pairwise objective, with weights or masks."""

    pairs: np.ndarray                      # (P, 2) int, i < j
    weights: np.ndarray = None             # (P,) nonnegative
    seed: int = None

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if np.any(self.pairs[:, 0] >= self.pairs[:, 1]):
            raise ConfigurationError("pairs must satisfy i < j")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (self.pairs.shape[0],):
                raise ConfigurationError("one weight per pair required")
            if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
                raise ConfigurationError("pair weights must be finite and >= 0")

    def __len__(self):
        return self.pairs.shape[0]

    @staticmethod
    def all_pairs(n):
        iu = np.triu_indices(n, 1)
        return PairSet(pairs=np.column_stack(iu))

    @classmethod
    def bernoulli(cls, n, b, seed):
        """Keep each pair independently with probability b (drawn once)."""
        if not 0 < b <= 1:
            raise ConfigurationError("subsampling probability must be in (0, 1]")
        iu = np.column_stack(np.triu_indices(n, 1))
        keep = np.random.default_rng(seed).random(iu.shape[0]) < b
        return cls(pairs=iu[keep], seed=seed)

    def replicate_masks(self, T, b_T, seed):
        """Independent Bernoulli(b_T) mask per (replicate, pair), drawn once."""
        if not 0 < b_T <= 1:
            raise ConfigurationError("mask probability must be in (0, 1]")
        rng = np.random.default_rng(seed)
        return (rng.random((T, len(self))) < b_T).astype(np.float64)


# --- exponent function and pairwise density ----------------------------------


def exponent_V(gamma, z1, z2):
    """Bivariate Brown-Resnick exponent function (plain numpy).

    V = Phi(a/2 - log(z1/z2)/a)/z1 + Phi(a/2 - log(z2/z1)/a)/z2, a = sqrt(2 gamma);
    at gamma = 0 the complete-dependence limit 1/min(z1, z2).
    """
    z1, z2 = float(z1), float(z2)
    if z1 <= 0 or z2 <= 0:
        raise ConfigurationError("exponent function needs positive arguments")
    if gamma < 0:
        raise ConfigurationError("the pairwise semivariogram must be nonnegative")
    if gamma == 0:
        return 1.0 / min(z1, z2)
    a = np.sqrt(2.0 * gamma)
    q1 = a / 2.0 - np.log(z1 / z2) / a
    q2 = a / 2.0 - np.log(z2 / z1) / a
    return float(_np_norm_cdf(q1) / z1 + _np_norm_cdf(q2) / z2)


def exponent_V_derivs(gamma, z1, z2):
    """(V, dV/dz1, dV/dz2, d2V/dz1 dz2), analytic.

    Uses V1 = -Phi(q1)/z1^2, V2 = -Phi(q2)/z2^2,
    V12 = -phi(q1)/(a z1^2 z2) (negative mixed partial).
    """
    z1, z2 = float(z1), float(z2)
    if z1 <= 0 or z2 <= 0:
        raise ConfigurationError("exponent function needs positive arguments")
    if gamma <= 0:
        raise ConfigurationError("derivatives require gamma > 0")
    a = np.sqrt(2.0 * gamma)
    q1 = a / 2.0 - np.log(z1 / z2) / a
    q2 = a / 2.0 - np.log(z2 / z1) / a
    V = float(_np_norm_cdf(q1) / z1 + _np_norm_cdf(q2) / z2)
    V1 = float(-_np_norm_cdf(q1) / z1**2)
    V2 = float(-_np_norm_cdf(q2) / z2**2)
    V12 = float(-_np_norm_pdf(q1) / (a * z1**2 * z2))
    return V, V1, V2, V12


def pair_loglik(gamma, z1, z2):
    """Bivariate max-stable log density log(V1 V2 - V12) - V."""
    V, V1, V2, V12 = exponent_V_derivs(gamma, z1, z2)
    dens = V1 * V2 - V12
    if dens <= 0:
        logger.warning("clamped nonpositive density argument at gamma=%.3g", gamma)
        dens = _DENSITY_FLOOR
    return float(np.log(dens) - V)


def _pair_loglik_node(gamma, zi, zj):
    """Tape version over (T, P) arrays: gamma is a (P,) node, z constants."""
    zi = np.asarray(zi, dtype=np.float64)
    zj = np.asarray(zj, dtype=np.float64)
    a = ad.sqrt(2.0 * gamma)
    log_ratio = np.log(zi / zj)
    q1 = 0.5 * a - log_ratio / a
    q2 = 0.5 * a + log_ratio / a
    V = ad.norm_cdf(q1) / zi + ad.norm_cdf(q2) / zj
    dens = ad.norm_cdf(q1) * ad.norm_cdf(q2) / (zi**2 * zj**2) \
        + ad.norm_pdf(q1) / (a * zi**2 * zj)
    pos = dens.value > _DENSITY_FLOOR
    if not pos.all():
        logger.warning("clamped %d nonpositive density arguments", (~pos).sum())
    dens_safe = ad.where(pos, dens, 1.0)
    ll = ad.where(pos, ad.log(dens_safe),
                  ad.constant(np.full(dens.value.shape, np.log(_DENSITY_FLOOR))))
    return ll - V


# --- dependence summaries ------------------------------------------------------


def extremal_coefficient(gamma):
    """theta(gamma) = 2 Phi(sqrt(gamma / 2)), in [1, 2]."""
    if isinstance(gamma, ad.Node):
        return 2.0 * ad.norm_cdf(ad.sqrt(0.5 * gamma))
    gamma = np.asarray(gamma, dtype=np.float64)
    if np.any(gamma < 0):
        raise ConfigurationError("semivariogram values must be nonnegative")
    return 2.0 * _np_norm_cdf(np.sqrt(0.5 * gamma))


def cep_chi(gamma):
    """Limiting conditional exceedance probability 2(1 - Phi(sqrt(gamma/2)))."""
    if isinstance(gamma, ad.Node):
        return 2.0 - extremal_coefficient(gamma)
    return 2.0 - extremal_coefficient(gamma)


def empirical_ec(maxima, pair):
    """F-madogram estimate of the pairwise extremal coefficient, in [1, 2]."""
    i, j = int(pair[0]), int(pair[1])
    zi = maxima.maxima[:, i]
    zj = maxima.maxima[:, j]
    T = zi.size
    if np.ptp(zi) == 0 or np.ptp(zj) == 0:
        raise DataError("degenerate margin in extremal coefficient estimate")
    Fi = scipy.stats.rankdata(zi, method="average") / (T + 1.0)
    Fj = scipy.stats.rankdata(zj, method="average") / (T + 1.0)
    nu = 0.5 * np.mean(np.abs(Fi - Fj))
    theta = (1.0 + 2.0 * nu) / (1.0 - 2.0 * nu)
    return float(np.clip(theta, 1.0, 2.0))


def empirical_cep(exceed, pair, u_prime):
    """Empirical conditional exceedance probability among retained events.

    Returns (value, ok): ok is False when the conditioning count is zero and
    the pair must be excluded from a loss.
    """
    i, j = int(pair[0]), int(pair[1])
    X = exceed.fields[exceed.retained]
    cond = X[:, i] >= u_prime
    denom = int(cond.sum())
    if denom == 0:
        return np.nan, False
    both = int((cond & (X[:, j] >= u_prime)).sum())
    return both / denom, True


# --- objectives ----------------------------------------------------------------


@dataclass
class ExtremesModelSpec:
    """Dependence model and fitting method for extremes data."""

    stack: WarpStack
    vario: VarioParams
    method: str = "wls"
    risk: str = "max"
    site_index: int = 0
    threshold: float = None          # Pareto-scale threshold u > 1
    gsm_weight_choice: str = "default"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.risk not in RISKS:
            raise ConfigurationError(f"unknown risk functional {self.risk!r}")
        if self.method == "gsm":
            if self.threshold is None or self.threshold <= 1:
                raise ConfigurationError("gsm needs a Pareto threshold u > 1")
            if self.gsm_weight_choice != "default":
                raise ConfigurationError(
                    f"unknown gsm weight choice {self.gsm_weight_choice!r}"
                )

    def param_groups(self):
        return list(self.stack.param_groups("warp1")) + self.vario.param_groups()


def _pair_gamma_node(spec, coords, pairs, naturals):
    """Semivariogram node over the listed site pairs."""
    w1 = [naturals[f"warp1.{i}.{u.kind}"] for i, u in enumerate(spec.stack.units)]
    W, _ = spec.stack.forward(coords, weights=w1)
    Wi = ad.gather_rows(W, pairs[:, 0])
    Wj = ad.gather_rows(W, pairs[:, 1])
    d2 = ad.sum_(ad.square(Wi - Wj), axis=1)
    pos = d2.value > 1e-24
    if not pos.all():
        raise DataError("coincident sites in a pairwise objective")
    h = ad.sqrt(d2)
    return vario_power(h, _first(naturals, "vario.range"),
                       _first(naturals, "vario.smoothness"))


def _first(naturals, name):
    return naturals[name][0]


class WlsObjective:
    """Weighted least squares on extremal coefficients (or CEPs).

    mode="maxstable" compares model extremal coefficients against empirical
    F-madogram values with weights 1/theta_hat; mode="rpareto" compares the
    limiting CEP chi against empirical CEPs with weights 1/max(chi_hat, 0.05).
    """

    def __init__(self, spec, coords, pairs, empirical, mode="maxstable"):
        if len(pairs) == 0:
            raise ConfigurationError("empty pair set")
        empirical = np.asarray(empirical, dtype=np.float64)
        if empirical.shape != (len(pairs),):
            raise ConfigurationError("one empirical value per pair required")
        self.spec = spec
        self.coords = np.asarray(coords, dtype=np.float64)
        self.mode = mode
        keep = np.isfinite(empirical)
        self.pairs = pairs.pairs[keep]
        self.empirical = empirical[keep]
        if self.pairs.shape[0] == 0:
            raise ConfigurationError("no usable pairs after dropping undefined ones")
        if pairs.weights is not None:
            self.weights = pairs.weights[keep]
        elif mode == "maxstable":
            self.weights = 1.0 / self.empirical
        else:
            self.weights = 1.0 / np.maximum(self.empirical, 0.05)
        self.groups = spec.param_groups()

    def param_groups(self):
        return self.groups

    def loss(self, naturals):
        gamma = _pair_gamma_node(self.spec, self.coords, self.pairs, naturals)
        if self.mode == "maxstable":
            model = extremal_coefficient(gamma)
        else:
            model = cep_chi(gamma)
        return ad.sum_(self.weights * ad.square(model - self.empirical))


class PclObjective:
    """Pairwise composite likelihood over Bernoulli-selected pairs."""

    def __init__(self, spec, maxima, pairs):
        if len(pairs) == 0:
            raise ConfigurationError("empty pair set: all pairs dropped")
        self.spec = spec
        self.maxima = maxima
        self.pairs = pairs.pairs
        self.pair_weights = (pairs.weights if pairs.weights is not None
                             else np.ones(len(pairs)))
        self.groups = spec.param_groups()

    def param_groups(self):
        return self.groups

    def loss(self, naturals):
        Z = self.maxima.maxima
        T = Z.shape[0]
        gamma = _pair_gamma_node(self.spec, self.maxima.coords, self.pairs,
                                 naturals)
        zi = Z[:, self.pairs[:, 0]]
        zj = Z[:, self.pairs[:, 1]]
        ll = _pair_loglik_node(gamma, zi, zj)          # (T, P)
        return -(1.0 / T) * ad.sum_(self.pair_weights * ll)


class RplObjective:
    """Randomized pairwise likelihood: per-replicate Bernoulli pair masks."""

    def __init__(self, spec, maxima, pairs, masks):
        if len(pairs) == 0:
            raise ConfigurationError("empty pair set")
        masks = np.asarray(masks, dtype=np.float64)
        if masks.shape != (maxima.n_reps, len(pairs)):
            raise ConfigurationError("need one mask per (replicate, pair)")
        if masks.sum() == 0:
            raise ConfigurationError("all replicate-pair terms masked out")
        self.spec = spec
        self.maxima = maxima
        self.pairs = pairs.pairs
        self.masks = masks
        self.groups = spec.param_groups()

    def param_groups(self):
        return self.groups

    def loss(self, naturals):
        Z = self.maxima.maxima
        T = Z.shape[0]
        gamma = _pair_gamma_node(self.spec, self.maxima.coords, self.pairs,
                                 naturals)
        zi = Z[:, self.pairs[:, 0]]
        zj = Z[:, self.pairs[:, 1]]
        ll = _pair_loglik_node(gamma, zi, zj)
        return -(1.0 / T) * ad.sum_(self.masks * ll)


# --- Brown-Resnick intensity and score matching --------------------------------


def _anchored_pieces(spec, coords, naturals):
    """Anchored semivariogram vector and matrix for the intensity (site 0)."""
    w1 = [naturals[f"warp1.{i}.{u.kind}"] for i, u in enumerate(spec.stack.units)]
    gamma_full = nonstat_vario_matrix(
        spec.stack, spec.vario, coords, weights=w1,
        range_=_first(naturals, "vario.range"),
        smoothness=_first(naturals, "vario.smoothness"),
    )
    g0 = gamma_full[1:, 0]                                # (m,)
    Sigma = ad.reshape(g0, (-1, 1)) + ad.reshape(g0, (1, -1)) - gamma_full[1:, 1:]
    return g0, Sigma


def _intensity_nodes(spec, coords, events, naturals):
    """Batched log-intensity and its first/second z-derivatives.

    events: (E, n) positive constants. Returns (loglam (E,), grad (E, n),
    diag_hess (E, n)) as nodes, anchored at site 0 (value is anchor
    invariant).
    """
    events = np.asarray(events, dtype=np.float64)
    E, n = events.shape
    if n < 2:
        raise ConfigurationError("intensity needs at least two sites")
    if np.any(events <= 0):
        raise DataError("events must be positive")
    m = n - 1
    g0, Sigma = _anchored_pieces(spec, coords, naturals)
    try:
        L, _ = _chol_jittered(Sigma, float(np.abs(Sigma.value).max()))
    except ConditioningError as exc:
        raise ConditioningError(f"singular anchored variogram matrix: {exc}") from exc

    log_ratio = np.log(events[:, 1:] / events[:, 0:1])    # (E, m) const
    omega = log_ratio + g0                                 # (E, m) node
    Ut = ad.solve_triangular(L, ad.transpose(omega))       # (m, E)
    U = ad.transpose(ad.solve_triangular(L, Ut, trans=True))  # (E, m) = omega Sigma^-1

    # diag(Sigma^-1) and 1' Sigma^-1 1 from the factor
    Kinv = ad.solve_triangular(L, ad.constant(np.eye(m)))
    diag_inv = ad.sum_(ad.square(Kinv), axis=0)            # (m,)
    ones_w = ad.solve_triangular(L, ad.constant(np.ones((m, 1))))
    one_quad = ad.sum_(ad.square(ones_w))                  # scalar

    quad = ad.sum_(omega * U, axis=1)                      # (E,)
    loglam = (
        -0.5 * m * LOG_2PI
        - 0.5 * ad.logdet_chol(L)
        - 2.0 * np.log(events[:, 0])
        - np.log(events[:, 1:]).sum(axis=1)
        - 0.5 * quad
    )

    sumU = ad.sum_(U, axis=1)                              # (E,)
    y0 = events[:, 0]
    yr = events[:, 1:]
    grad0 = (sumU - 2.0) / y0                              # (E,)
    grad_rest = (-1.0 - U) / yr                            # (E, m)
    hess0 = (2.0 - sumU) / y0**2 - one_quad / y0**2
    hess_rest = (1.0 + U) / yr**2 - ad.reshape(diag_inv, (1, -1)) / yr**2

    grad = ad.concat([ad.reshape(grad0, (-1, 1)), grad_rest], axis=1)
    hess = ad.concat([ad.reshape(hess0, (-1, 1)), hess_rest], axis=1)
    return loglam, grad, hess


def br_log_intensity(stack, vario, coords, z, anchor=0):
    """Brown-Resnick intensity at one point: (log lambda, d/dz, diag d2/dz2).

    The anchored parameterization uses the given anchor site; the value and
    derivatives are invariant to that choice.
    """
    coords = np.asarray(coords, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64).ravel()
    n = coords.shape[0]
    if z.size != n:
        raise DataError("one value per site required")
    perm = np.r_[anchor, np.delete(np.arange(n), anchor)]
    spec = ExtremesModelSpec(stack=stack, vario=vario, method="wls")
    groups = spec.param_groups()
    leaves = {g.name: ad.constant(g.init_unconstrained) for g in groups}
    nats = {g.name: g.transform.apply(leaves[g.name]) for g in groups}
    loglam, grad, hess = _intensity_nodes(
        spec, coords[perm], z[perm].reshape(1, -1), nats
    )
    inv = np.argsort(perm)
    return (float(loglam.value[0]), grad.value[0][inv], hess.value[0][inv])


def gsm_weight(choice, z, r_value, risk="sum", site_index=0):
    """Score-matching weights w_i = z_i (1 - exp(1 - r)) and d w_i / d z_i.

    The derivative accounts for the risk functional's dependence on z_i; for
    the max risk the subgradient routes to the first attaining coordinate.
    """
    if choice != "default":
        raise ConfigurationError(f"unknown gsm weight choice {choice!r}")
    z = np.asarray(z, dtype=np.float64)
    damp = 1.0 - np.exp(1.0 - r_value)
    w = z * damp
    if risk == "sum":
        drdz = np.ones_like(z)
    elif risk == "site":
        drdz = np.zeros_like(z)
        drdz[site_index] = 1.0
    else:
        drdz = np.zeros_like(z)
        drdz[int(np.argmax(z))] = 1.0
    dw = damp + z * np.exp(1.0 - r_value) * drdz
    return w, dw


class GsmObjective:
    """Weighted gradient score matching for r-Pareto exceedances.

    Per retained scaled event y the statistic is
    sum_i [ 2 w_i w_i' dlog/dy_i + w_i^2 d2log/dy_i^2 + 0.5 w_i^2 (dlog/dy_i)^2 ],
    summed over events. Weights and their derivatives do not depend on the
    model parameters, so they are plain arrays.
    """

    def __init__(self, spec, exceed):
        events = exceed.events
        if events.shape[0] == 0:
            raise DataError("no retained events above the threshold")
        self.spec = spec
        self.exceed = exceed
        self.events = events
        W = np.empty_like(events)
        dW = np.empty_like(events)
        for t in range(events.shape[0]):
            r = risk_eval(exceed.risk, events[t], exceed.site_index)
            W[t], dW[t] = gsm_weight(spec.gsm_weight_choice, events[t], r,
                                     exceed.risk, exceed.site_index)
        self.W = W
        self.dW = dW
        self.groups = spec.param_groups()

    def param_groups(self):
        return self.groups

    def loss(self, naturals):
        _, grad, hess = _intensity_nodes(self.spec, self.exceed.coords,
                                         self.events, naturals)
        term = (2.0 * self.W * self.dW) * grad \
            + ad.square(ad.constant(self.W)) * hess \
            + 0.5 * ad.square(ad.constant(self.W)) * ad.square(grad)
        return ad.sum_(term)


# --- public loss wrappers -------------------------------------------------------


def _loss_value(obj):
    groups = obj.param_groups()
    leaves = {g.name: ad.constant(g.init_unconstrained) for g in groups}
    nats = {g.name: g.transform.apply(leaves[g.name]) for g in groups}
    loss = obj.loss(nats)
    grads = ad.grad(loss, [leaves[g.name] for g in groups])
    return LossValue(value=loss.item(),
                     gradients={g.name: gr for g, gr in zip(groups, grads)})


def wls_loss(spec, coords, pairs, empirical, mode="maxstable"):
    """Weighted-least-squares loss and gradient at the spec's parameters."""
    return _loss_value(WlsObjective(spec, coords, pairs, empirical, mode))


def pcl_loss(spec, maxima, pairs):
    """Pairwise composite likelihood loss and gradient."""
    return _loss_value(PclObjective(spec, maxima, pairs))


def rpl_loss(spec, maxima, pairs, masks):
    """Randomized pairwise likelihood loss and gradient."""
    return _loss_value(RplObjective(spec, maxima, pairs, masks))


def gsm_loss(spec, exceed):
    """Gradient score matching loss and gradient."""
    return _loss_value(GsmObjective(spec, exceed))


# --- simulators (test utilities) -------------------------------------------------


def _variogram_matrix_np(stack, vario, coords):
    spec_groups = stack.param_groups("warp1")
    leaves = {g.name: ad.constant(g.init_unconstrained) for g in spec_groups}
    w1 = [g.transform.apply(leaves[g.name]) for g in spec_groups]
    G = nonstat_vario_matrix(stack, vario, coords,
                             weights=w1 if w1 else None)
    return G.value


def br_simulate_approx(stack, vario, coords, n_fields, n_spectral, seed):
    """Truncated-spectral Brown-Resnick simulator (biased low in the tail).

    Z(s) = max_{j <= J} W_j(s) / Gamma_j with Gamma_j cumulative unit
    exponentials and W_j log-Gaussian with the (possibly warped) variogram,
    built from a site-0-anchored covariance. Margins are approximately unit
    Frechet. Test utility only.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    rng = np.random.default_rng(seed)
    if n == 1:
        E = rng.exponential(size=(n_fields, 1))
        return 1.0 / E
    G = _variogram_matrix_np(stack, vario, coords)
    g0 = G[1:, 0]
    K = g0[:, None] + g0[None, :] - G[1:, 1:]
    K = K + 1e-12 * max(K.max(), 1.0) * np.eye(n - 1)
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("anchored covariance is not PD") from exc
    sig2 = np.concatenate([[0.0], 2.0 * g0])   # Var U(s_i)
    out = np.empty((n_fields, n))
    for t in range(n_fields):
        gaps = rng.exponential(size=n_spectral)
        gam = np.cumsum(gaps)
        normals = rng.standard_normal(size=(n_spectral, n - 1))
        U = np.concatenate(
            [np.zeros((n_spectral, 1)), normals @ L.T], axis=1
        )
        W = np.exp(U - 0.5 * sig2)
        out[t] = (W / gam[:, None]).max(axis=0)
    return out


def rpareto_site_simulate(stack, vario, coords, site_index, n_events, seed):
    """Exact site-conditioned Brown-Resnick Pareto events (risk = value at s0).

    Z(s) = P exp{U(s) - gamma(s, s0)} with U anchored at s0 and P unit
    Pareto; r_site(Z/P) = 1 by construction.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    rng = np.random.default_rng(seed)
    perm = np.r_[site_index, np.delete(np.arange(n), site_index)]
    G = _variogram_matrix_np(stack, vario, coords[perm])
    g0 = G[1:, 0]
    K = g0[:, None] + g0[None, :] - G[1:, 1:]
    K = K + 1e-12 * max(K.max(), 1.0) * np.eye(n - 1)
    L = np.linalg.cholesky(K)
    P = 1.0 / rng.random(n_events)             # unit Pareto
    normals = rng.standard_normal(size=(n_events, n - 1))
    U = normals @ L.T
    Q = np.concatenate(
        [np.ones((n_events, 1)), np.exp(U - g0)], axis=1
    )
    out = P[:, None] * Q
    inv = np.argsort(perm)
    return out[:, inv]
