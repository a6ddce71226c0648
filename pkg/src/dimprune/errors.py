"""Exception taxonomy shared across the package.

The CLI maps these onto its exit-code contract, so raising the right
class matters more than the message text.
"""


class DimPruneError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DimPruneError, ValueError):
    """Operand shapes are incompatible. Messages name both shapes."""


class NumericError(DimPruneError, ArithmeticError):
    """Non-finite values or other numeric breakdown."""


class UsageError(DimPruneError, RuntimeError):
    """An API was driven outside its contract (e.g. reusing a consumed tape)."""


class ConfigError(DimPruneError, ValueError):
    """A configuration value or key is invalid."""


class FormatError(DimPruneError, ValueError):
    """A file or byte stream does not match its declared format."""
