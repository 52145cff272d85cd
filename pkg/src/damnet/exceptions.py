"""Error taxonomy shared across the package.

The CLI maps these onto distinct exit codes, so keep the hierarchy
flat and the meanings disjoint.
"""


class DamnetError(Exception):
    """Base class for all package errors."""


class ConfigError(DamnetError):
    """Invalid or inconsistent configuration value."""


class ShapeError(DamnetError):
    """Tensor geometry does not satisfy an operation's contract."""


class DataError(DamnetError):
    """Bad input data: labels, degenerate batches, unreadable audio."""


class FormatError(DamnetError):
    """Malformed binary file (archive or checkpoint)."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(DamnetError):
    """Non-finite values where the contract requires finite ones."""


class DivergenceError(NumericError):
    """Training loss became non-finite."""

    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index
