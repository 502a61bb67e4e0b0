"""Exception types raised across the package.

All of them derive from ``DgsegError`` so callers (and the CLI) can catch the
whole family at once; each also inherits the closest builtin so ordinary
``except ValueError`` handlers keep working.
"""


class DgsegError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DgsegError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(DgsegError, ValueError):
    """A configuration value is out of range or inconsistent."""


class ContractError(DgsegError, ValueError):
    """A call violated an operation's pre-conditions."""


class InsufficientDataError(DgsegError, ValueError):
    pass


class LabelError(DgsegError, ValueError):
    pass


class DataError(DgsegError, ValueError):
    """Malformed or inconsistent on-disk data."""


class TrainingError(DgsegError, RuntimeError):
    pass


class EvaluationError(DgsegError, RuntimeError):
    pass


class ReportError(DgsegError, ValueError):
    pass
