"""Exception types shared across the package.

The CLI maps these onto exit codes: validation-style errors exit 1,
numeric errors exit 2, inconclusive checks exit 3.
"""


class ShapemixError(Exception):
    """Base class for all package errors."""


class DimensionError(ShapemixError, ValueError):
    """Incompatible tensor shapes; the message names the offending axis."""


class ConfigError(ShapemixError, ValueError):
    """Invalid or inconsistent configuration value."""


class ValidationError(ShapemixError, ValueError):
    """Input data violates a documented precondition."""


class NumericError(ShapemixError, ArithmeticError):
    """Non-finite value where finite arithmetic was required."""

    def __init__(self, message: str, param: str | None = None):
        super().__init__(message)
        self.param = param


class FormatError(ShapemixError, ValueError):
    """Malformed file; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class GenerationError(ShapemixError, RuntimeError):
    """A procedural generator exhausted its retry budget."""


class InconclusiveError(ShapemixError, RuntimeError):
    """A check could not finish decisively (e.g. persistent selection ties)."""
