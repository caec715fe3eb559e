"""Exception hierarchy shared by every module."""


class IQAError(Exception):
    """Base class for all package errors."""


class ConfigError(IQAError, ValueError):
    pass


class InputError(IQAError, ValueError):
    pass


class NumericError(IQAError, ArithmeticError):
    pass


class UndefinedCorrelationError(NumericError):
    """Correlation requested on fewer than two points or a constant vector."""


class BackendError(IQAError, RuntimeError):
    pass
