"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: config/usage problems exit 1,
numeric failures exit 2, I/O and corruption exit 3.
"""


class FewdetError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FewdetError, ValueError):
    """Operands have incompatible shapes; the message names both shapes."""


class NumericError(FewdetError, ArithmeticError):
    """A computation produced or received non-finite values."""


class ConfigError(FewdetError, ValueError):
    """Invalid configuration value, unknown key, or unusable combination."""


class GenerationError(ConfigError):
    """Episode generation cannot satisfy the benchmark spec (e.g. no room
    to place the requested number of objects on the grid)."""


class CorruptionError(FewdetError, IOError):
    """An on-disk artifact is truncated, malformed, or fails its digest."""
