"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ValidationError -> 2,
NumericError -> 3, BudgetError -> 4.
"""


class NceLabError(Exception):
    """Base class for all package errors."""


class ValidationError(NceLabError):
    """Invalid configuration, dimensions, or serialized input."""


class NumericError(NceLabError):
    """Overflow, non-finite values, or singular matrices."""


class InitializationError(NumericError):
    """Objective non-finite at the optimizer's starting point."""


class SingularMatrixError(NumericError):
    """A matrix that must be inverted has an eigenvalue below the floor."""


class BudgetError(NceLabError):
    """An exact enumeration would exceed its configured term budget."""
