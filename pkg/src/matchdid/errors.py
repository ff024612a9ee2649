"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures to
process exit statuses without inspecting messages.
"""

from __future__ import annotations


class MatchDidError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(MatchDidError):
    """Inputs violate a documented precondition."""

    exit_code = 2


class NumericalError(MatchDidError):
    """A computation could not be carried out reliably."""

    exit_code = 3


class InputOutputError(MatchDidError):
    """Reading or writing a file failed."""

    exit_code = 4


class NonPSDCovariance(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class InvalidProbability(ValidationError):
    pass


class UnsupportedConfig(ValidationError):
    pass


class InvalidGrid(ValidationError):
    pass


class EmptyGroup(ValidationError):
    pass


class InsufficientYears(ValidationError):
    pass


class MissingColumn(ValidationError):
    pass


class UnbalancedPanel(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class SingularCovariance(NumericalError):
    def __init__(self, block: str, detail: str = ""):
        self.block = block
        msg = f"covariance block '{block}' is singular at tolerance"
        if detail:
            msg = f"{msg} ({detail})"
        super().__init__(msg)


class SingularStructure(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class DegenerateLoadings(NumericalError):
    pass


class DivisionByZero(NumericalError):
    pass


class NoFeasibleMatch(NumericalError):
    pass
