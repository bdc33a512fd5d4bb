class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed or incompatible input data."""


class NumericError(ArithmeticError):
    """NaN or divergence during training."""
