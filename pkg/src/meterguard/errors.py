"""Exception hierarchy.

Every exception carries the process exit code the CLI maps it to, so the
three failure families (bad configuration, bad data, numerical breakdown)
stay distinguishable from a shell.
"""


class MeterGuardError(Exception):
    exit_code = 1


class ConfigError(MeterGuardError, ValueError):
    """Invalid parameter or configuration value."""

    exit_code = 2


class SizeLimitError(ConfigError):
    pass


class DataError(MeterGuardError):
    """Input data is missing, malformed or inconsistent."""

    exit_code = 3


class EmptyInputError(DataError, ValueError):
    pass


class ShapeError(DataError, ValueError):
    pass


class AlignmentError(DataError, ValueError):
    pass


class DegenerateInputError(DataError, ValueError):
    pass


class ParseError(DataError, ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class NumericError(MeterGuardError, ArithmeticError):
    """A computation produced non-finite values."""

    exit_code = 4


class DivergenceError(NumericError):
    def __init__(self, message: str, epoch: int | None = None):
        self.epoch = epoch
        super().__init__(message)
