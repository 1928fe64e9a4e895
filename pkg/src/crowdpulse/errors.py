"""Exception hierarchy shared across the package.

Two families matter to callers: data errors (corrupt or inconsistent
inputs) and numerical errors (estimation or evaluation failures). The CLI
maps them to distinct exit codes.
"""


class CrowdpulseError(Exception):
    """Base class for all package errors."""


class DataError(CrowdpulseError):
    """Input data is malformed or internally inconsistent."""


class SchemaError(DataError):
    """A CSV file does not match the expected header or id constraints."""


class ParseError(DataError):
    """A cell failed to parse; carries the offending row and column."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class CausalityError(DataError):
    """Raw timestamps violate event ordering beyond what tie-breaking repairs."""


class InvalidTransition(DataError):
    """An event cannot be applied to the current platform state."""


class UnknownUser(DataError):
    """A user id is not registered at the queried time."""


class InactiveItem(DataError):
    """An item id is not active at the queried time."""


class DegenerateData(DataError):
    """A closed-form estimate has a zero denominator."""


class PartitionError(DataError):
    """Interval segments have gaps or overlaps where a partition is required."""


class InsufficientData(DataError):
    """Too few contributions for the requested diagnostic."""


class NumericalError(CrowdpulseError):
    """Numerical evaluation or optimization failure."""


class DomainError(NumericalError):
    """A function was evaluated outside its mathematical domain."""


class NonFinite(NumericalError):
    """A likelihood or derivative evaluated to NaN or infinity."""


class SingularHessian(NumericalError):
    """The Newton system is singular beyond the damping retries."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class NoConvergence(NumericalError):
    """Newton iteration exhausted its budget; carries the best iterate."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class NonIncreasing(NumericalError):
    """Rescaled times failed to increase strictly (numerical breakdown)."""


class NotNegDefinite(NumericalError):
    """Observed information is not positive definite; no standard errors."""
