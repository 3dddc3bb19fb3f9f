"""Exception types shared across the package.

The CLI maps each class to a distinct exit code, so library code should raise
the most specific one that applies.
"""


class HsfuseError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(HsfuseError, ValueError):
    """Invalid configuration value. ``field`` names the offending key."""

    exit_code = 2
    kind = "config"

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class DataError(HsfuseError, ValueError):
    exit_code = 3
    kind = "data"


class NumericError(HsfuseError, RuntimeError):
    exit_code = 4
    kind = "numeric"
