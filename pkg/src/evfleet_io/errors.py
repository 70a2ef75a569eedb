"""Exception hierarchy shared by all modules.

The CLI maps the three top-level families to exit codes:
``ConfigError`` -> 2, ``SolverFailure`` -> 3, ``DataError`` -> 4.
"""


class EvFleetError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ConfigError(EvFleetError, ValueError):
    exit_code = 2


class SolverFailure(EvFleetError, RuntimeError):
    """An optimization or linear solve did not reach an acceptable optimum."""

    exit_code = 3

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class SingularSystem(SolverFailure):
    pass


class AllTuplesFailed(SolverFailure):
    pass


class DataError(EvFleetError, ValueError):
    exit_code = 4


class MissingColumn(DataError):
    pass


class MissingValue(DataError):
    pass


class NonMonotonicTimestamps(DataError):
    pass


class GapInSeries(DataError):
    pass


class InsufficientHistory(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class FeatureMismatch(DataError):
    pass


class ResolutionMismatch(DataError):
    pass


class EmptySeries(DataError):
    pass


class LengthMismatch(DataError):
    pass


class InvalidBounds(DataError):
    pass


class InvalidInstance(DataError):
    pass
