"""Exception types raised across the package."""


class D2CError(Exception):
    """Base class for all package errors."""


class ConfigError(D2CError, ValueError):
    pass


class DimensionError(D2CError, ValueError):
    pass


class InputError(D2CError, ValueError):
    pass


class ContractError(D2CError, RuntimeError):
    pass


class NumericError(D2CError, ArithmeticError):
    """Raised when a NaN/Inf shows up where finite values are required."""


class FormatError(D2CError, ValueError):
    """Malformed dataset or checkpoint file."""
