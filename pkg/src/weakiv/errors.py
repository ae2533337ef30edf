"""Exception hierarchy.

Every error raised by the package derives from :class:`WeakIVError` so callers
(and the CLI) can map whole families onto exit codes.
"""


class WeakIVError(Exception):
    """Base class for all package errors."""


class DataError(WeakIVError):
    """Input data violates a structural requirement."""


class DimensionError(DataError, ValueError):
    pass


class RankError(DataError):
    pass


class NonFiniteError(DataError, ValueError):
    pass


class ParseError(DataError):
    pass


class GapError(DataError):
    pass


class SchemaError(DataError):
    pass


class NumericalError(WeakIVError, ArithmeticError):
    """A matrix inverse or eigen-decomposition could not be trusted."""


class SingularityError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass


class PartitionError(NumericalError):
    pass


class UsageError(WeakIVError):
    """Request is well-formed data but asks for something unsupported."""


class UnsupportedError(UsageError):
    pass


class DomainError(UsageError, ValueError):
    pass


class ConfigError(UsageError, ValueError):
    pass
