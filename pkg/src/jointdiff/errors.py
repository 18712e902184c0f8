"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ConfigError(ValueError):
    """Raised when a configuration value or combination is invalid."""


class FormatError(ValueError):
    """Raised when a file on disk does not match its expected format."""
