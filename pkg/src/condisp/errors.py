"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class CondispError(Exception):
    """Base class for all package errors."""


# -- data validation ---------------------------------------------------------


class ValidationError(CondispError, ValueError):
    pass


class DimensionMismatchError(ValidationError):
    pass


class NonFiniteValueError(ValidationError):
    def __init__(self, block: str, row: int, column: int):
        self.block = block
        self.row = row
        self.column = column
        super().__init__(f"non-finite value in {block} at row {row}, column {column}")


class IndexOutOfRangeError(ValidationError):
    pass


class OverlappingPartitionError(ValidationError):
    pass


# -- density estimation ------------------------------------------------------


class EmptyDataError(CondispError, ValueError):
    pass


class EmptyCellError(CondispError):
    """No (or too few) observations share the requested discrete level."""


class ZeroDensityError(CondispError, ArithmeticError):
    """A kernel denominator vanished numerically at the given query."""

    def __init__(self, message: str, query=None):
        self.query = query
        super().__init__(message if query is None else f"{message} (query={query!r})")


class DegenerateBandwidthError(CondispError):
    """Every candidate bandwidth produced a degenerate cross-validation fit."""


# -- models and estimation ---------------------------------------------------


class SupportError(CondispError, ValueError):
    pass


class SeparationError(CondispError):
    pass


class SingularDesignError(CondispError, ArithmeticError):
    pass


class DegenerateDensityError(CondispError, ArithmeticError):
    pass


class NonFiniteObjectiveError(CondispError, ArithmeticError):
    pass


class OptimizerDivergedError(CondispError):
    pass


class TooManyFailuresError(CondispError):
    pass


class IncompatibleSchemeError(CondispError, ValueError):
    pass


# -- cli ---------------------------------------------------------------------


class ConfigError(CondispError, ValueError):
    pass


class DataError(CondispError, ValueError):
    pass
