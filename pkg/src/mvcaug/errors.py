"""Exception hierarchy.

Every error raised by the package derives from :class:`MVCError` and carries a
``category`` used by the command line to pick an exit status.
"""


class MVCError(Exception):
    category = "config"


class InvalidArgumentError(MVCError, ValueError):
    category = "config"


class ConfigError(MVCError):
    category = "config"


class ShapeError(MVCError, ValueError):
    category = "shape"


class ParseError(MVCError, ValueError):
    category = "storage"


class NumericError(MVCError, ArithmeticError):
    category = "numeric"


class DegenerateStepError(NumericError):
    pass


class StorageError(MVCError, OSError):
    category = "storage"


class LeakageError(MVCError):
    category = "leakage"


EXIT_CODES = {"config": 2, "shape": 3, "numeric": 4, "storage": 5, "leakage": 6}
