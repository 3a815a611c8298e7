"""Exception hierarchy shared by every CARL module.

The CLI maps these onto exit codes: configuration problems exit with 2,
data problems with 3 and numeric failures with 4.
"""


class CarlError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(CarlError, ValueError):
    """A hyperparameter or argument is outside its valid range."""


class DimensionError(CarlError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(CarlError, ValueError):
    """A precondition of an operation does not hold."""


class NumericError(CarlError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class DataError(CarlError, ValueError):
    """Input data is malformed or unusable."""


class ParseError(DataError):
    pass


class SchemaError(DataError):
    pass


class RangeError(DataError):
    pass


class DegenerateTargetError(DataError):
    pass


class UndefinedCorrelationError(DataError):
    """Correlation of a constant vector was requested.

    The mean absolute error is still well defined and travels on the
    exception as ``mae``.
    """

    def __init__(self, message: str, mae: float):
        super().__init__(message)
        self.mae = mae


class ConfigError(CarlError, ValueError):
    pass


class CompatibilityError(CarlError, ValueError):
    """A checkpoint and an input do not agree on vocabulary or length."""


class CheckpointFormatError(CarlError, ValueError):
    pass


class CheckpointIOError(CarlError, OSError):
    """Checkpoint file is truncated or unreadable."""
