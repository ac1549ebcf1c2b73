"""Exception hierarchy.

Every error carries the process exit code the CLI uses when it escapes a
subcommand, so library callers and the command line agree on categories.
"""


class MispError(Exception):
    exit_code = 1


class ConfigError(MispError, ValueError):
    exit_code = 2


class DataError(MispError, ValueError):
    exit_code = 3


class DimensionError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class DegenerateInputError(DataError):
    pass


class NumericError(DataError):
    pass


class DomainError(MispError, ValueError):
    exit_code = 3


class DivergenceError(MispError, ArithmeticError):
    """Raised when a training loop produces a non-finite loss."""

    exit_code = 4

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class CheckFailure(MispError):
    exit_code = 5
