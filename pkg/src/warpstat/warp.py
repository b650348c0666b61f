"""Composable injective coordinate warpings.

A warping is a composition of simple units, each bijective on the working
domain: axial units stretch one coordinate with a monotone map, radial basis
units push space toward or away from grid centers, and a complex
linear-fractional unit supplies global smooth deformation. After each unit
the affected axes are affinely renormalized back to [-0.5, 0.5] (bounds taken
over the reference coordinate set) so fixed hyperparameters such as sigmoid
centers and kernel bandwidths stay calibrated at every depth.

All forward maps are built on the autodiff tape: gradients flow to every
unit's trainable weights, including through the renormalization bounds.
"""

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, PoleError
from .params import (
    IDENTITY_NUDGE,
    Identity,
    ParamGroup,
    ScaledTanh,
    Softplus,
    Square,
    Transform,
)

DOMAIN_LO = -0.5
DOMAIN_HI = 0.5

# conservative per-center weight bound keeping a radial unit orientation
# preserving: |w| <= RBF_BOUND_FACTOR * grid spacing
RBF_BOUND_FACTOR = 0.85

MOBIUS_POLE_TOL = 1e-6

_SOFTPLUS_INV_ONE = float(np.log(np.e - 1.0))


class Rescaler:
    """Per-axis affine map from raw coordinates onto [-0.5, 0.5].

    Fitted on training coordinates; applied verbatim to new coordinates, so
    points outside the training box land outside the unit box and are
    flagged as extrapolation.
    """

    def __init__(self, lo, hi):
        self.lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))

    @classmethod
    def fit(cls, coords):
        coords = np.asarray(coords, dtype=np.float64)
        return cls(coords.min(axis=0), coords.max(axis=0))

    def transform(self, coords):
        coords = np.asarray(coords, dtype=np.float64)
        span = self.hi - self.lo
        safe = np.where(span > 0, span, 1.0)
        return (coords - self.lo) / safe + DOMAIN_LO

    def outside_mask(self, coords):
        coords = np.asarray(coords, dtype=np.float64)
        return ((coords < self.lo) | (coords > self.hi)).any(axis=1)

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["lo"]), np.array(d["hi"]))


class AwuWeights(Transform):
    """Axial-unit weight constraint: first weight > 0, the rest >= 0.

    The linear weight goes through a softplus; sigmoid weights are squared so
    that an exact-zero (identity) configuration exists at a finite internal
    value.
    """

    def apply(self, u):
        return ad.concat([ad.softplus(u[0:1]), ad.square(u[1:])], axis=0)

    def invert(self, x):
        x = np.asarray(x, dtype=np.float64)
        out = np.empty_like(x)
        out[0] = Softplus().invert(x[0:1])[0]
        out[1:] = np.sqrt(x[1:])
        return out

    def describe(self):
        return "AwuWeights"


class AxialWarpUnit:
    """Monotone map of one coordinate: linear term plus sigmoid bumps."""

    kind = "awu"

    def __init__(self, dim, steepness, lims, centers, weights=None):
        if steepness <= 0:
            raise ConfigurationError("axial unit steepness must be positive")
        self.dim = int(dim)
        if self.dim < 1:
            raise ConfigurationError("axis index is 1-based and must be >= 1")
        self.steepness = float(steepness)
        self.lims = (float(lims[0]), float(lims[1]))
        self.centers = np.asarray(centers, dtype=np.float64)
        if self.centers.size and (
            np.any(np.diff(self.centers) <= 0)
            or self.centers.min() < self.lims[0] - 1e-12
            or self.centers.max() > self.lims[1] + 1e-12
        ):
            raise ConfigurationError(
                "axial unit centers must be strictly increasing within lims"
            )
        r = self.centers.size + 1
        if weights is None:
            weights = np.zeros(r)
            weights[0] = 1.0
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.size != r:
            raise ConfigurationError(
                f"axial unit expects {r} weights (1 linear + {r - 1} sigmoid)"
            )

    @classmethod
    def default(cls, dim, r, steepness=200.0, lims=(DOMAIN_LO, DOMAIN_HI)):
        """Identity-initialized unit with r basis functions, centers equally
        spaced at lo + (i-1)(hi-lo)/(r-1), i = 2..r."""
        r = int(r)
        if r < 1:
            raise ConfigurationError("axial unit needs r >= 1 basis functions")
        lo, hi = float(lims[0]), float(lims[1])
        if r == 1:
            centers = np.empty(0)
        else:
            i = np.arange(2, r + 1)
            centers = lo + (i - 1) * (hi - lo) / (r - 1)
        return cls(dim=dim, steepness=steepness, lims=(lo, hi), centers=centers)

    @property
    def n_weights(self):
        return self.weights.size

    def transform(self):
        return AwuWeights()

    def init_unconstrained(self):
        u = np.full(self.n_weights, IDENTITY_NUDGE)
        u[0] = _SOFTPLUS_INV_ONE
        w = self.weights
        if w[0] != 1.0 or np.any(w[1:] != 0.0):
            u = self.transform().invert(np.maximum(w, IDENTITY_NUDGE**2))
        return u

    def renorm_axes(self, d):
        return (self.dim - 1,)

    def apply(self, X, w):
        """Warp column ``dim`` of X (node, n x d); other columns untouched."""
        X = ad.as_node(X)
        w = ad.as_node(w)
        d = X.shape[1]
        j = self.dim - 1
        if j >= d:
            raise ConfigurationError(
                f"axial unit dim={self.dim} exceeds input dimension {d}"
            )
        s = X[:, j]
        out = w[0] * s
        if self.centers.size:
            args = self.steepness * (ad.reshape(s, (-1, 1)) - self.centers)
            bumps = ad.sigmoid(args) @ ad.reshape(w[1:], (-1, 1))
            out = out + ad.reshape(bumps, (-1,))
        cols = [X[:, k] if k != j else out for k in range(d)]
        return ad.concat([ad.reshape(c, (-1, 1)) for c in cols], axis=1)

    def to_dict(self):
        return {
            "kind": self.kind,
            "dim": self.dim,
            "steepness": self.steepness,
            "lims": list(self.lims),
            "centers": self.centers.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            dim=d["dim"],
            steepness=d["steepness"],
            lims=d["lims"],
            centers=np.array(d["centers"]),
            weights=np.array(d["weights"]),
        )


def awu_eval(unit, s):
    """Scalar axial-unit map: w1*s + sum_i w_i sigmoid(b1 (s - c_i))."""
    s = np.asarray(s, dtype=np.float64)
    w = unit.weights
    out = w[0] * s
    if unit.centers.size:
        args = unit.steepness * (s[..., None] - unit.centers)
        out = out + (1.0 / (1.0 + np.exp(-args))) @ w[1:]
    return out


class RbfBlockUnit:
    """Radial displacement field on a 3^res x 3^res center grid."""

    kind = "rbf"

    def __init__(self, res=1, weights=None):
        self.res = int(res)
        if self.res < 1:
            raise ConfigurationError("rbf resolution must be a positive integer")
        k = 3**self.res
        axis = np.linspace(DOMAIN_LO, DOMAIN_HI, k)
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        self.centers = np.column_stack([gx.ravel(), gy.ravel()])
        self.spacing = 1.0 / k
        self.bandwidth = 1.0 / (2.0 * self.spacing**2)
        self.weight_bound = RBF_BOUND_FACTOR * self.spacing
        if weights is None:
            weights = np.zeros(self.centers.shape[0])
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.size != self.centers.shape[0]:
            raise ConfigurationError(
                f"rbf unit at res={self.res} expects {self.centers.shape[0]} weights"
            )
        if np.any(np.abs(self.weights) >= self.weight_bound):
            raise ConfigurationError(
                f"rbf weights must satisfy |w| < {self.weight_bound:.4g}"
            )

    @property
    def n_weights(self):
        return self.weights.size

    def transform(self):
        return ScaledTanh(self.weight_bound)

    def init_unconstrained(self):
        return self.transform().invert(self.weights)

    def renorm_axes(self, d):
        return tuple(range(d))

    def apply(self, X, w):
        X = ad.as_node(X)
        w = ad.as_node(w)
        if X.shape[1] != 2:
            raise ConfigurationError("rbf unit operates on 2-D coordinates")
        diffs = ad.reshape(X, (-1, 1, 2)) - self.centers  # (n, k, 2)
        d2 = ad.sum_(ad.square(diffs), axis=2)  # (n, k)
        bump = ad.exp(-self.bandwidth * d2) * w  # (n, k)
        displacement = ad.sum_(ad.reshape(bump, (-1, self.n_weights, 1)) * diffs, axis=1)
        return X + displacement

    def to_dict(self):
        return {"kind": self.kind, "res": self.res, "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(res=d["res"], weights=np.array(d["weights"]))


def rbf_eval(unit, s):
    """Plain-numpy radial unit map at points s (2,) or (n, 2)."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    diffs = s[:, None, :] - unit.centers[None, :, :]
    d2 = np.sum(diffs**2, axis=2)
    bump = np.exp(-unit.bandwidth * d2) * unit.weights
    out = s + np.sum(bump[:, :, None] * diffs, axis=1)
    return out[0] if out.shape[0] == 1 and np.asarray(s).ndim == 2 else out


class MobiusUnit:
    """Complex linear-fractional map (a z + b) / (c z + d) of the plane.

    Weights are the eight real/imaginary parts [a, b, c, d]; identity is
    a = d = 1, b = c = 0.
    """

    kind = "mobius"

    def __init__(self, weights=None):
        if weights is None:
            weights = np.array([1.0, 0, 0, 0, 0, 0, 1.0, 0])
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.weights.size != 8:
            raise ConfigurationError("mobius unit expects 8 real weights")
        a, b, c, d = self.complex_coeffs(self.weights)
        if abs(a * d - b * c) < 1e-12:
            raise ConfigurationError("degenerate mobius unit: a*d - b*c ~ 0")

    @staticmethod
    def complex_coeffs(w):
        return (
            complex(w[0], w[1]),
            complex(w[2], w[3]),
            complex(w[4], w[5]),
            complex(w[6], w[7]),
        )

    @property
    def n_weights(self):
        return 8

    def transform(self):
        return Identity()

    def init_unconstrained(self):
        return self.weights.copy()

    def renorm_axes(self, d):
        return tuple(range(d))

    def apply(self, X, w):
        X = ad.as_node(X)
        w = ad.as_node(w)
        if X.shape[1] != 2:
            raise ConfigurationError("mobius unit operates on 2-D coordinates")
        x, y = X[:, 0], X[:, 1]
        num_re = w[0] * x - w[1] * y + w[2]
        num_im = w[0] * y + w[1] * x + w[3]
        den_re = w[4] * x - w[5] * y + w[6]
        den_im = w[4] * y + w[5] * x + w[7]
        den2 = ad.square(den_re) + ad.square(den_im)
        jmin = int(np.argmin(den2.value))
        if den2.value[jmin] < MOBIUS_POLE_TOL**2:
            raise PoleError(X.value[jmin], float(np.sqrt(den2.value[jmin])))
        out_re = (num_re * den_re + num_im * den_im) / den2
        out_im = (num_im * den_re - num_re * den_im) / den2
        return ad.concat(
            [ad.reshape(out_re, (-1, 1)), ad.reshape(out_im, (-1, 1))], axis=1
        )

    def to_dict(self):
        return {"kind": self.kind, "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(weights=np.array(d["weights"]))


def mobius_eval(unit, s):
    """Plain complex-arithmetic evaluation at a point or points."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a, b, c, d = unit.complex_coeffs(unit.weights)
    z = s[:, 0] + 1j * s[:, 1]
    den = c * z + d
    bad = np.abs(den) < MOBIUS_POLE_TOL
    if bad.any():
        j = int(np.argmax(bad))
        raise PoleError(s[j], abs(den[j]))
    phi = (a * z + b) / den
    out = np.column_stack([phi.real, phi.imag])
    return out[0] if out.shape[0] == 1 else out


_UNIT_TYPES = {
    "awu": AxialWarpUnit,
    "rbf": RbfBlockUnit,
    "mobius": MobiusUnit,
}


def unit_from_dict(d):
    return _UNIT_TYPES[d["kind"]].from_dict(d)


class WarpStack:
    """Ordered composition of warping units with post-unit renormalization."""

    def __init__(self, units, input_dim=2):
        self.units = list(units)
        self.input_dim = int(input_dim)
        for i, u in enumerate(self.units):
            if u.kind in ("rbf", "mobius") and self.input_dim != 2:
                raise ConfigurationError(
                    f"unit {i} ({u.kind}) requires a 2-D stack"
                )

    def __len__(self):
        return len(self.units)

    def weight_list(self):
        return [u.weights for u in self.units]

    def param_groups(self, prefix="warp"):
        groups = []
        for i, u in enumerate(self.units):
            rate_key = "mobius" if u.kind == "mobius" else "warp_weights"
            groups.append(
                ParamGroup(
                    name=f"{prefix}.{i}.{u.kind}",
                    transform=u.transform(),
                    init_unconstrained=u.init_unconstrained(),
                    role="warp",
                    rate_key=rate_key,
                )
            )
        return groups

    def set_weights(self, weights):
        for u, w in zip(self.units, weights):
            w = np.asarray(w, dtype=np.float64)
            if w.shape != u.weights.shape:
                raise ConfigurationError("weight shape mismatch in stack update")
            u.weights = w.copy()

    def forward(self, S, weights=None, frozen_affines=None):
        """Warp coordinates S (n x input_dim).

        weights: optional per-unit weight arrays/nodes (defaults to the units'
        stored weights). frozen_affines: renormalization constants recorded by
        a previous forward pass over the reference (training) coordinates;
        when None they are computed from S itself and returned.

        Returns (warped node, affines).
        """
        S = ad.as_node(S)
        if S.ndim != 2 or S.shape[1] != self.input_dim:
            raise ConfigurationError(
                f"expected coordinates of shape (n, {self.input_dim})"
            )
        if weights is None:
            weights = self.weight_list()
        if len(weights) != len(self.units):
            raise ConfigurationError("one weight block per unit required")

        X = S
        affines = []
        for i, (unit, w) in enumerate(zip(self.units, weights)):
            try:
                X = unit.apply(X, w)
                if frozen_affines is None:
                    X, aff = _renorm(X, unit.renorm_axes(self.input_dim))
                    affines.append(aff)
                else:
                    X = _apply_affine(X, frozen_affines[i])
            except PoleError:
                raise
            except ConfigurationError as exc:
                raise ConfigurationError(f"unit {i}: {exc}") from exc
        if frozen_affines is not None:
            return X, frozen_affines
        return X, affines

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "units": [u.to_dict() for u in self.units],
        }

    @classmethod
    def from_dict(cls, d):
        return cls([unit_from_dict(u) for u in d["units"]], input_dim=d["input_dim"])


def _renorm(X, axes):
    """Affinely map the given axes of X back onto [-0.5, 0.5].

    Bounds come from X itself (the reference coordinate set); returns the
    renormalized node and the affine description [(axis, mn, mx), ...].
    """
    aff = []
    cols = []
    d = X.shape[1]
    for k in range(d):
        col = X[:, k]
        if k in axes:
            mn = ad.min_(col)
            mx = ad.max_(col)
            span = mx - mn
            if span.item() <= 0:
                aff.append((k, mn.item(), mx.item()))
            else:
                col = (col - mn) / span + DOMAIN_LO
                aff.append((k, mn, mx))
        cols.append(ad.reshape(col, (-1, 1)))
    return ad.concat(cols, axis=1), aff


def _apply_affine(X, aff):
    cols = [X[:, k] for k in range(X.shape[1])]
    for k, mn, mx in aff:
        span = mx - mn
        span_v = span.item() if isinstance(span, ad.Node) else float(span)
        if span_v > 0:
            cols[k] = (cols[k] - mn) / span + DOMAIN_LO
    return ad.concat([ad.reshape(c, (-1, 1)) for c in cols], axis=1)


def freeze_affines(affines):
    """Convert node-valued renormalization bounds to plain floats."""
    frozen = []
    for aff in affines:
        frozen.append(
            [
                (
                    k,
                    mn.item() if isinstance(mn, ad.Node) else float(mn),
                    mx.item() if isinstance(mx, ad.Node) else float(mx),
                )
                for k, mn, mx in aff
            ]
        )
    return frozen


def stack_forward(stack, S, weights=None, frozen_affines=None):
    """Warped coordinates as a plain array (row-wise unit composition)."""
    W, _ = stack.forward(S, weights=weights, frozen_affines=frozen_affines)
    return W.value


def default_layers(kind, r=50, steepness=200.0, lims=(DOMAIN_LO, DOMAIN_HI), res=1):
    """Standard warping stacks at identity initialization.

    kind="spatial2d": axial unit per axis, one radial block, one mobius unit.
    kind="temporal": a single axial unit on the (1-D) time axis.
    """
    if kind == "spatial2d":
        units = [
            AxialWarpUnit.default(dim=1, r=r, steepness=steepness, lims=lims),
            AxialWarpUnit.default(dim=2, r=r, steepness=steepness, lims=lims),
            RbfBlockUnit(res=res),
            MobiusUnit(),
        ]
        return WarpStack(units, input_dim=2)
    if kind == "temporal":
        units = [AxialWarpUnit.default(dim=1, r=r, steepness=steepness, lims=lims)]
        return WarpStack(units, input_dim=1)
    raise ConfigurationError(f"unknown layer preset {kind!r}")


def grid_signed_areas(W, n_grid):
    """Signed areas of the quad cells of a warped n_grid x n_grid lattice.

    W: warped coordinates of the row-major lattice, shape (n_grid^2, 2).
    Each quad is split into two triangles; returns all 2*(n_grid-1)^2 areas.
    """
    P = np.asarray(W, dtype=np.float64).reshape(n_grid, n_grid, 2)
    p00 = P[:-1, :-1]
    p10 = P[1:, :-1]
    p11 = P[1:, 1:]
    p01 = P[:-1, 1:]

    def tri_area(a, b, c):
        return 0.5 * (
            (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1])
            - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])
        )

    return np.concatenate(
        [tri_area(p00, p10, p11).ravel(), tri_area(p00, p11, p01).ravel()]
    )


def fold_check(stack, weights=None, n_grid=50, frozen_affines=None):
    """True when the warp preserves orientation on a regular lattice.

    Discrete bijectivity check: all signed cell areas of the warped
    n_grid x n_grid lattice on the working domain share one sign.
    """
    axis = np.linspace(DOMAIN_LO, DOMAIN_HI, n_grid)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    S = np.column_stack([gx.ravel(), gy.ravel()])
    if stack.input_dim == 1:
        S = axis.reshape(-1, 1)
        W = stack_forward(stack, S, weights=weights, frozen_affines=frozen_affines)
        d = np.diff(W[:, 0])
        return bool(np.all(d > 0) or np.all(d < 0))
    W = stack_forward(stack, S, weights=weights, frozen_affines=frozen_affines)
    areas = grid_signed_areas(W, n_grid)
    return bool(np.all(areas > 0) or np.all(areas < 0))
