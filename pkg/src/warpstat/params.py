"""Trainable parameters: constraint transforms and named groups.

Every trainable quantity lives in an unconstrained internal representation;
a transform maps it to its natural domain (positive variances, bounded
deformation weights, smoothness in its interval). The optimizer only ever
sees unconstrained values, so constraints hold after every step by
construction.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

# Unconstrained seed used where the natural value 0 sits at a stationary
# point of its transform: keeps the initial map an identity to machine
# precision while leaving a usable gradient direction for the optimizer.
IDENTITY_NUDGE = 1e-8


class Transform:
    """Bijection from unconstrained reals onto a natural parameter domain."""

    def apply(self, u):
        """Tape version; u is a Node."""
        raise NotImplementedError

    def apply_np(self, u):
        return self.apply(ad.constant(u)).value

    def invert(self, x):
        """Natural -> unconstrained (plain arrays)."""
        raise NotImplementedError

    def describe(self):
        return type(self).__name__


class Identity(Transform):
    def apply(self, u):
        return u

    def invert(self, x):
        return np.asarray(x, dtype=np.float64)


class Log(Transform):
    """natural = exp(u); for strictly positive scales and variances."""

    def apply(self, u):
        return ad.exp(u)

    def invert(self, x):
        return np.log(np.asarray(x, dtype=np.float64))


class Softplus(Transform):
    """natural = log(1 + e^u) > 0; near-identity for large u."""

    def apply(self, u):
        return ad.softplus(u)

    def invert(self, x):
        x = np.asarray(x, dtype=np.float64)
        # inverse of log1p(exp(u)); stable for small and large x
        return x + np.log(-np.expm1(-x))


class Square(Transform):
    """natural = u^2 >= 0.

    Used for the nonnegative sigmoid weights of axial warping units: unlike
    a softplus, zero is reachable at a finite internal value, so an identity
    warp is exactly representable while remaining a few optimizer steps away
    from any useful weight magnitude.
    """

    def apply(self, u):
        return ad.square(u)

    def invert(self, x):
        return np.sqrt(np.asarray(x, dtype=np.float64))


class ScaledTanh(Transform):
    """natural = bound * tanh(u), an open interval (-bound, bound)."""

    def __init__(self, bound):
        self.bound = float(bound)

    def apply(self, u):
        return self.bound * ad.tanh(u)

    def invert(self, x):
        return np.arctanh(np.asarray(x, dtype=np.float64) / self.bound)

    def describe(self):
        return f"ScaledTanh({self.bound!r})"


class ScaledSigmoid(Transform):
    """natural = hi * sigmoid(u), an open interval (0, hi)."""

    def __init__(self, hi):
        self.hi = float(hi)

    def apply(self, u):
        return self.hi * ad.sigmoid(u)

    def invert(self, x):
        p = np.asarray(x, dtype=np.float64) / self.hi
        return np.log(p) - np.log1p(-p)

    def describe(self):
        return f"ScaledSigmoid({self.hi!r})"


class Tanh(Transform):
    """natural = tanh(u) in (-1, 1); for correlations."""

    def apply(self, u):
        return ad.tanh(u)

    def invert(self, x):
        return np.arctanh(np.asarray(x, dtype=np.float64))


_TRANSFORMS = {
    "Identity": Identity,
    "Log": Log,
    "Softplus": Softplus,
    "Square": Square,
    "ScaledTanh": ScaledTanh,
    "ScaledSigmoid": ScaledSigmoid,
    "Tanh": Tanh,
}


def transform_from_description(desc):
    name, _, args = desc.partition("(")
    cls = _TRANSFORMS[name]
    if args:
        return cls(float(args.rstrip(")")))
    return cls()


@dataclass
class ParamGroup:
    """One named block of trainable values sharing a transform.

    role: "warp" groups stay frozen during warm-up steps; "dependence"
    groups always train. rate_key selects the per-group learning rate.
    """

    name: str
    transform: Transform
    init_unconstrained: np.ndarray
    role: str = "dependence"
    rate_key: str = "dependence"

    def __post_init__(self):
        self.init_unconstrained = np.atleast_1d(
            np.asarray(self.init_unconstrained, dtype=np.float64)
        )
        if self.role not in ("warp", "dependence"):
            raise ValueError(f"unknown role {self.role!r}")


class ParamVector:
    """Ordered collection of named parameter groups with current values."""

    def __init__(self, groups):
        names = [g.name for g in groups]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter group names")
        self.groups = {g.name: g for g in groups}
        self.values = {g.name: g.init_unconstrained.copy() for g in groups}

    def names(self):
        return list(self.groups)

    def natural(self, name):
        g = self.groups[name]
        return g.transform.apply_np(self.values[name])

    def naturals(self):
        return {name: self.natural(name) for name in self.groups}

    def leaf_nodes(self):
        """Fresh unconstrained leaves for one loss evaluation."""
        return {name: ad.constant(v) for name, v in self.values.items()}

    def natural_nodes(self, leaves):
        return {
            name: self.groups[name].transform.apply(leaf)
            for name, leaf in leaves.items()
        }

    def set_unconstrained(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.values[name].shape:
            raise ValueError(
                f"shape mismatch for {name}: {value.shape} vs {self.values[name].shape}"
            )
        self.values[name] = value.copy()

    def set_natural(self, name, value):
        self.set_unconstrained(name, self.groups[name].transform.invert(value))

    def copy(self):
        pv = ParamVector(list(self.groups.values()))
        for name, v in self.values.items():
            pv.values[name] = v.copy()
        return pv

    def check_roundtrip(self, atol=1e-12):
        """Transform round-trip sanity: invert(apply(u)) == u."""
        for name, g in self.groups.items():
            u = self.values[name]
            x = g.transform.apply_np(u)
            u2 = g.transform.invert(x)
            if not np.allclose(u, u2, atol=atol, rtol=1e-9):
                raise AssertionError(f"transform round-trip failed for {name}")


@dataclass
class LearnRates:
    """Per-group learning rates, keyed by parameter kind."""

    warp_weights: float = 0.02
    mobius: float = 0.001
    dependence: float = 0.01
    noise: float = 0.01
    extra: dict = field(default_factory=dict)

    def rate_for(self, key):
        if key in self.extra:
            return float(self.extra[key])
        return float(getattr(self, key))
