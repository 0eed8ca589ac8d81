class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class DataError(ValueError):
    """Dataset content violates a structural invariant."""


class NumericError(FloatingPointError):
    """A numeric precondition failed (zero norm, non-finite loss, ...)."""
