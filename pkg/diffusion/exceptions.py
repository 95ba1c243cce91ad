"""Error hierarchy. ``exit_code`` is the process status a command exits with."""


class SiamDiffError(Exception):
    exit_code = 1


class ConfigError(SiamDiffError, ValueError):
    exit_code = 2


class DataError(SiamDiffError, ValueError):
    exit_code = 3


class NumericError(SiamDiffError, ArithmeticError):
    exit_code = 4


class ShapeError(NumericError, ValueError):
    pass


class NonFiniteError(NumericError, FloatingPointError):
    pass


class StorageError(SiamDiffError, OSError):
    exit_code = 5
