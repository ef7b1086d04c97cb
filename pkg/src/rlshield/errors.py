"""Exception hierarchy shared across the package.

The CLI maps these to exit codes: ConfigError -> 1, DataError -> 2,
DivergenceError -> 3. Modules subclass them with more specific names.
"""


class RlshieldError(Exception):
    """Base class for all package errors."""


class ConfigError(RlshieldError):
    """Invalid configuration, flags or generator settings."""


class DataError(RlshieldError):
    """Input data is missing, malformed or inconsistent."""


class DivergenceError(RlshieldError):
    """Training produced non-finite values; aborted with a checkpoint."""
