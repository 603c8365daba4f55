"""Exception types raised across the package."""


class AttnShapError(Exception):
    """Base class for all package errors."""


class InvalidInputError(AttnShapError, ValueError):
    """Input values violate a documented precondition."""


class DimensionError(InvalidInputError):
    """Array shapes are incongruent."""


class DataError(AttnShapError):
    """A dataset or serialized file is malformed."""


class ConfigError(AttnShapError):
    """A run configuration is invalid."""


class NumericError(AttnShapError, ArithmeticError):
    """A computation produced non-finite or degenerate values."""
