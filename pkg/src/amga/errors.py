"""Exception taxonomy shared across the package.

CLI exit codes: ConfigError -> 2, I/O and file-format errors -> 3,
NumericError -> 4.
"""


class AmgaError(Exception):
    pass


class ConfigError(AmgaError):
    """Invalid configuration value, unknown config key, or violated precondition."""


class DimensionError(AmgaError):
    """Shape mismatch between operands; the message names both shapes."""


class NumericError(AmgaError):
    """Non-finite values where finite ones are required."""


class TrainingError(NumericError):
    """Training diverged; carries the epoch where the loss went non-finite."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class AttackError(NumericError):
    """Attack loss went non-finite; carries the iteration index."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class FileFormatError(AmgaError):
    """Base class for binary tensor-file parse errors."""


class BadMagicError(FileFormatError):
    pass


class FormatVersionError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass
