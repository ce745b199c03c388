"""Exception types shared across the package."""


class InputError(ValueError):
    """Malformed or inconsistent arguments."""


class ConfigError(ValueError):
    """Invalid environment or experiment configuration."""


class NumericError(ArithmeticError):
    """A numerical routine produced or received non-finite or invalid values."""
