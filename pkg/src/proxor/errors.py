"""Exception hierarchy shared across the package."""

from __future__ import annotations


class ProxorError(Exception):
    """Base class for all errors raised by proxor."""


class ValidationError(ProxorError, ValueError):
    """Raised when a sample violates a data invariant.

    ``violations`` holds every problem found, not only the first one.
    """

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class NonBinaryTreatment(ValidationError):
    pass


class NonBinaryOutcome(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class DegenerateStratum(ValidationError):
    pass


class NoConvergence(ProxorError):
    pass


class SingularJacobian(ProxorError):
    pass


class EmptyCell(ProxorError):
    pass


class BothBridgesMissing(ProxorError, ValueError):
    pass


class IllConditioned(ProxorError):
    pass


class InvalidSpec(ProxorError, ValueError):
    pass


class IncompleteProxies(ProxorError):
    pass


class ParseError(ProxorError, ValueError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column
