"""Error taxonomy shared by the library and the CLI exit-code mapping."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (exit code 2)."""


class DataError(ValueError):
    """Missing or malformed input data (exit code 3)."""


class NumericError(RuntimeError):
    """Non-finite loss or gradient during optimization (exit code 4)."""
