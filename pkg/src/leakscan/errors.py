"""Shared exception types, mapped onto CLI exit codes by the cli module."""


class ConfigError(ValueError):
    """Bad configuration or missing referenced file (CLI exit code 1)."""


class DataError(ValueError):
    """Malformed or invariant-violating input data (CLI exit code 2)."""


class NumericError(RuntimeError):
    """Numeric failure such as a diverged training run (CLI exit code 3)."""
