class ConfigError(ValueError):
    """Invalid configuration value."""


class DataError(ValueError):
    """Input data cannot support the requested computation."""
