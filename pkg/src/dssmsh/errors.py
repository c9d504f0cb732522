"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an input lies outside a function's domain."""


class NonFiniteError(FloatingPointError):
    """Raised when a value or gradient is NaN or infinite."""


class ConfigError(ValueError):
    """Raised for invalid or incomplete configuration."""


class MissingParameterError(ConfigError, KeyError):
    """Raised when a parameter path is absent from a store."""

    def __str__(self):
        return ValueError.__str__(self)
