"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
ContractError -> 4.
"""


class TfpdetError(Exception):
    """Base class for all package errors."""


class ConfigError(TfpdetError):
    """Invalid configuration value or combination."""


class DataError(TfpdetError):
    """Malformed input file or dataset (schema or binary format)."""


class ContractError(TfpdetError):
    """An operation was called outside its contract at runtime."""
