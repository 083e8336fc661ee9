"""Shared exception types used across the package."""


class DimensionError(ValueError):
    """Array shapes or widths do not match what an operation requires."""


class StateError(RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class DomainError(ValueError):
    """Input lies outside an operation's mathematical domain."""


class PreconditionError(ValueError):
    """A documented precondition on the inputs is violated."""


class InputError(ValueError):
    """Malformed external input (actions, datasets, files)."""


class ConfigError(ValueError):
    """Invalid experiment configuration."""
