"""Exception taxonomy shared across the package.

The CLI maps these onto its exit-code contract: validation and check
failures exit 1, file-format and I/O problems exit 2.
"""


class IbenError(Exception):
    """Base class for all errors raised by this package."""


class DataFormatError(IbenError):
    """A file on disk does not match its documented format."""


class ConfigError(IbenError):
    """A run configuration failed schema validation."""


class TrainingError(IbenError):
    """Training aborted (non-finite loss or gradient)."""
