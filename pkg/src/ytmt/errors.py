"""Exception types shared across the package."""


class YtmtError(Exception):
    """Base class for all package errors."""


class DimensionError(YtmtError, ValueError):
    """Tensor extents are incompatible with an operation."""


class ContractError(YtmtError, RuntimeError):
    """A documented precondition of an operation was violated."""


class NumericError(YtmtError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ParameterError(YtmtError, ValueError):
    """A scalar parameter lies outside its admissible range."""


class IngestionError(YtmtError, OSError):
    """An input file could not be read or is inconsistent with its pair."""


class ConfigError(YtmtError, ValueError):
    """A configuration document is malformed or contains unknown keys."""
