"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``lkreg.cli``).
"""


class ConfigError(ValueError):
    """Invalid network / loss / training configuration."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class UsageError(RuntimeError):
    """An API was used out of contract (e.g. backward twice on one graph)."""


class NumericalError(ArithmeticError):
    """NaN/Inf encountered in a loss, gradient, or debug-mode forward op."""


class DataError(IOError):
    """Input data is missing, unreadable, or malformed."""
