"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class InputError(ValueError):
    """Malformed input data handed to an operation."""


class DatasetError(ValueError):
    """A dataset could not be loaded or yielded no usable records."""


class VocabFormatError(ValueError):
    """A vocabulary file failed to parse."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class IntegrityError(ValueError):
    """Checksums disagree: vocab vs token tables, or checkpoint vs vocab."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or inconsistent with its config."""
