"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class ConfigError(Exception):
    """Invalid or inconsistent configuration / hyper-parameters."""


class DataError(Exception):
    """Malformed input data, missing files, or shape mismatches."""


class NumericError(Exception):
    """Non-finite values detected during computation."""
