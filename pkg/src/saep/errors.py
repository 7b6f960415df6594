"""Exception types shared across the package.

Every error carries a stable ``code`` string (``E_SHAPE``, ``E_FORMAT`` ...)
that the command line prints and maps to an exit status.
"""


class SaepError(Exception):
    code = "E_INTERNAL"
    exit_status = 4


class ArgError(SaepError, ValueError):
    code = "E_ARG"
    exit_status = 2


class ShapeError(SaepError, ValueError):
    code = "E_SHAPE"
    exit_status = 4


class ConfigError(SaepError, ValueError):
    code = "E_CONFIG"
    exit_status = 4


class NumericError(SaepError, ArithmeticError):
    code = "E_NUMERIC"
    exit_status = 4


class FormatError(SaepError):
    code = "E_FORMAT"
    exit_status = 3


class TruncatedError(FormatError):
    code = "E_TRUNCATED"


class SaepIOError(SaepError, OSError):
    code = "E_IO"
    exit_status = 3
