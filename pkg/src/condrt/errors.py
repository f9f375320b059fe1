"""Exception types shared across the package."""

from __future__ import annotations


class ConfigurationError(ValueError):
    """A model, design or test was configured outside its supported range."""


class EnumerationError(ConfigurationError):
    """Explicit enumeration of an assignment space was requested beyond the bound."""


class PositivityError(ConfigurationError):
    """An assignment density or reference density is not strictly positive."""


class InfeasibleRestrictionError(ValueError):
    """A restriction of an assignment space leaves no admissible assignment."""


class UnsupportedNullError(ValueError):
    """The requested null hypothesis cannot be built from the given exposure."""


class DataError(ValueError):
    """Input data violates the expected schema."""


class ImputabilityError(RuntimeError):
    """A statistic read an outcome that is not imputable under the null.

    ``unit`` is the offending unit index when known; ``pair`` is the
    ``(observed, candidate)`` assignment pair being evaluated when known.
    """

    def __init__(self, message: str, unit: int | None = None, pair=None):
        super().__init__(message)
        self.unit = unit
        self.pair = pair


class DegenerateStatisticError(ArithmeticError):
    """A statistic is undefined for some candidate assignment (e.g. an empty group)."""


class CollinearityError(ArithmeticError):
    """The regression design matrix is rank deficient."""

    def __init__(self, message: str, columns: list[str] | None = None):
        super().__init__(message)
        self.columns = list(columns or [])


class ImpracticalConditioningError(RuntimeError):
    """Rejection sampling from a conditioning cell accepts too rarely to be useful."""


class UnreachableConditioningError(ValueError):
    """A conditioning value has zero probability under the assignment mechanism."""


class RegistrationError(KeyError):
    """A statistic name is already registered, or is unknown."""
