"""Exception hierarchy shared across the package.

Validation problems subclass ``ValueError`` and numeric failures subclass
``ArithmeticError`` so callers can catch either family; the CLI maps them to
exit codes 1 and 2 respectively.
"""

from __future__ import annotations


class PssflowError(Exception):
    """Base class for every error raised on purpose by this package."""


class ValidationError(PssflowError, ValueError):
    """Bad argument, malformed input, or violated precondition."""


class EventFormatError(ValidationError):
    """An event file could not be parsed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class EventOrderError(ValidationError):
    """Event timestamps are not sorted non-decreasingly."""

    def __init__(self, index: int, t_prev: int, t_here: int):
        super().__init__(
            f"timestamps not sorted at record {index}: {t_here} < {t_prev}"
        )
        self.index = index


class SpecError(ValidationError):
    """A synthetic scene specification cannot be honoured."""


class NumericError(PssflowError, ArithmeticError):
    """Non-finite values or overflow inside a numeric routine.

    ``where`` optionally carries the position, block, iteration or step at
    which the problem was first detected.
    """

    def __init__(self, message: str, where: int | None = None):
        if where is not None:
            message = f"{message} at index {where}"
        super().__init__(message)
        self.where = where


class ResampleRequired(NumericError):
    """Eigendecomposition rejected; retry with a fresh perturbation seed."""


class CheckError(PssflowError):
    """A verification routine could not run meaningfully."""
