"""Exception types raised by msgee."""

from __future__ import annotations


class MsgeeError(Exception):
    """Base class for all package errors."""


class InvalidStateError(MsgeeError, ValueError):
    """A state label is unknown, or absorbing where a transient one is required."""


class DomainError(MsgeeError, ValueError):
    """An argument lies outside the domain of a function."""


class DomainUndefinedError(MsgeeError, ValueError):
    """A restricted time domain cannot be formed (no observed response jumps)."""


class InsufficientClustersError(MsgeeError, ValueError):
    """Fewer than two clusters are available for a variance computation."""


class NumericalError(MsgeeError, ArithmeticError):
    """Base class for failures of the numerical routines."""


class SingularDesignError(NumericalError):
    """The weighted design (or the H matrix) is rank deficient."""


class SeparationError(NumericalError):
    """The estimating equation has no finite root (complete separation)."""


class EmptyDomainError(MsgeeError, ValueError):
    """No estimable time point falls inside the requested domain."""


class DataFormatError(MsgeeError, ValueError):
    """Malformed input data. ``line`` is the 1-based CSV line when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConvergenceWarning(UserWarning):
    """Newton iterations stopped at ``max_iter`` before reaching tolerance."""
