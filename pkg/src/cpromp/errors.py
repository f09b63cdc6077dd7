"""Exception types raised by cpromp."""


class CProMPError(Exception):
    """Base class for all library errors."""


class DomainError(CProMPError, ValueError):
    """An argument lies outside the domain of the operation (e.g. t not in [0, T])."""


class NumericError(CProMPError, ArithmeticError):
    """A matrix factorization or inversion failed."""


class ConstraintError(CProMPError, ValueError):
    """A constraint is malformed or inconsistent with the problem it is attached to."""

    def __init__(self, message, constraint_id=None):
        if constraint_id is not None:
            message = f"constraint {constraint_id}: {message}"
        super().__init__(message)
        self.constraint_id = constraint_id


class ProblemFormatError(CProMPError, ValueError):
    """An input file does not follow the expected schema."""
