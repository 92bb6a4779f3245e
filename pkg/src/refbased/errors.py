"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 2, data
validation problems exit 3, numeric/estimation problems exit 4.
"""


class RefbasedError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(RefbasedError, ValueError):
    """An argument violates a documented precondition."""


class DataValidationError(RefbasedError):
    """Input data fails a structural check (CSV format, monotonicity)."""


class EstimationError(RefbasedError):
    """A model fit cannot be carried out on the given data."""


class NumericError(RefbasedError):
    """A numeric operation failed (non-positive-definite matrix, divergence)."""
