"""Package exception hierarchy.

The CLI maps these onto exit codes: ConfigurationError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class WarpstatError(Exception):
    pass


class ConfigurationError(WarpstatError):
    """Invalid model/unit/run configuration."""


class DataError(WarpstatError):
    """Input data violates the documented schema or preconditions."""


class NumericalError(WarpstatError):
    """Numerical failure during evaluation or fitting."""


class PoleError(NumericalError):
    """Mobius denominator vanished at an evaluation point."""

    def __init__(self, location, modulus):
        self.location = tuple(float(v) for v in location)
        self.modulus = float(modulus)
        super().__init__(
            f"transformation pole near point {self.location}: |cz + d| = {modulus:.3e}"
        )


class ConditioningError(NumericalError):
    """Covariance or conditional variance lost positive definiteness."""
