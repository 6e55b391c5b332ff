"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced NaN or infinite values."""


class ConsistencyError(ValueError):
    """Two structures that must align (names, shapes, cities) do not."""


class DegenerateInputError(ValueError):
    """Input is too small to define the requested quantity."""


class ConfigurationError(ValueError):
    """A configuration value is missing, unknown or out of range."""


class CheckpointError(IOError):
    """A container file cannot be decoded."""
