"""Exception hierarchy.

The CLI maps the three top-level families onto exit codes: configuration
problems (2), data problems (3) and numerical failures (4).
"""


class SurvRiskError(Exception):
    """Base class for all package errors."""


class ConfigError(SurvRiskError, ValueError):
    """Invalid parameter or configuration value."""


class DataError(SurvRiskError, ValueError):
    """Input data violates a schema or invariant."""


class SchemaError(DataError):
    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"missing column: {column!r}")


class RowError(DataError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class DuplicateIdError(DataError):
    pass


class EmptyCohortError(DataError):
    pass


class NumericalError(SurvRiskError, ArithmeticError):
    """A fit or metric could not be computed."""


class UnfitError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message, last=None):
        self.last = last
        super().__init__(message)


class RankError(NumericalError):
    def __init__(self, message, columns=()):
        self.columns = list(columns)
        super().__init__(message)


class UndefinedMetricError(NumericalError):
    pass
