"""Exception types shared across the package."""


class KometError(Exception):
    """Base class for all package errors."""


class ShapeError(KometError, ValueError):
    """Tensor shapes or ranks incompatible with an operation."""


class ParameterError(KometError, ValueError):
    """An operation parameter is outside its valid range."""


class ConfigError(KometError, ValueError):
    """A configuration value violates its invariants."""


class InputError(KometError, ValueError):
    """Runtime input data violates an operation's preconditions."""


class DataError(KometError, ValueError):
    """Malformed corpus, label, or metric input."""
