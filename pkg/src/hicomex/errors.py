"""Exception types shared across the package.

Each maps to a CLI exit code: ConfigError -> 1, DataError -> 2,
NumericalCheckError -> 3.
"""


class HicomexError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(HicomexError):
    """Invalid configuration: bad values, unknown keys, impossible shapes."""

    exit_code = 1


class DimensionError(ConfigError):
    """Tensor shapes are incompatible for the requested operation."""


class DataError(HicomexError):
    """Bad dataset content: labels out of range, missing files, leakage."""

    exit_code = 2


class CheckpointError(HicomexError):
    """Checkpoint file corrupt or incompatible with the active config."""

    exit_code = 2


class NumericalCheckError(HicomexError):
    """A numerical verification (gradient check) exceeded its tolerance."""

    exit_code = 3
