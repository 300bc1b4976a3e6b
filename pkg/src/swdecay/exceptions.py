"""Exception hierarchy.

Validation problems derive from ``ValueError`` and numerical failures from
``ArithmeticError`` so callers can catch either family without importing
this module.
"""


class SwdecayError(Exception):
    """Base class for all package errors."""


class ValidationError(SwdecayError, ValueError):
    """Input does not satisfy a documented precondition."""


class RegionError(ValidationError):
    """Correlation parameters fall outside the positive-definite region."""

    def __init__(self, message, bound=None):
        super().__init__(message)
        self.bound = bound


class NonIdentifiableDesignError(ValidationError):
    """The layout carries no information about the intervention effect."""


class InsufficientClustersError(ValidationError):
    """Too few clusters for the requested degrees-of-freedom rule."""


class DatasetError(ValidationError):
    """Malformed or inconsistent trial dataset."""


class NumericalError(SwdecayError, ArithmeticError):
    """A numerical routine could not produce a usable answer."""


class SingularMatrixError(NumericalError):
    """A matrix that must be inverted or factorized is singular."""


class DegenerateDataError(NumericalError):
    """Data with (numerically) zero residual variation."""
