"""Exception types. Each maps to a CLI exit code."""


class UrbanICLError(Exception):
    exit_code = 1


class ConfigError(UrbanICLError, ValueError):
    exit_code = 2


class DataError(UrbanICLError, ValueError):
    exit_code = 3


class NumericalError(UrbanICLError, ArithmeticError):
    exit_code = 4


class CheckpointFormatError(DataError):
    pass
