"""Exception hierarchy shared by every module."""


class EegKdError(Exception):
    """Base class for all package errors."""


class ShapeError(EegKdError, ValueError):
    pass


class DomainError(EegKdError, ValueError):
    pass


class NumericError(EegKdError, ArithmeticError):
    pass


class StateError(EegKdError, RuntimeError):
    pass


class FormatError(EegKdError, ValueError):
    pass


class ParseError(FormatError):
    pass


class ValidationError(EegKdError, ValueError):
    pass


class SplitError(EegKdError, ValueError):
    pass


class DataError(EegKdError, KeyError):
    def __str__(self):
        # KeyError quotes its message; keep it readable
        return str(self.args[0]) if self.args else ""


class ModeViolation(StateError):
    """Raised when a training mode touches data its contract forbids."""
