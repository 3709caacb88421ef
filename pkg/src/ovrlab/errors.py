"""Exception taxonomy shared across the toolkit.

Every error raised on purpose derives from :class:`ToolkitError` so callers
(and the CLI) can separate "bad data" from genuine bugs.
"""

from __future__ import annotations


class ToolkitError(Exception):
    """Base class for all errors raised deliberately by this package."""


class AudioFormatError(ToolkitError):
    """Container or encoding we do not understand (bad magic, unsupported codec)."""


class TruncatedFileError(ToolkitError):
    """File ends before the data its own header promises."""


class SilentSignalError(ToolkitError):
    """An operation that needs signal energy got digital silence."""


class TooShortError(ToolkitError):
    """Input shorter than the minimum the algorithm is defined over."""


class ConfigMismatchError(ToolkitError):
    """Two artifacts that must share a grid (STFT layout, sample rate) do not."""


class SchemaError(ToolkitError):
    """Serialized artifact violates its schema."""


class VersionError(SchemaError):
    """Serialized artifact carries a schema version this code does not speak."""


class TalkerMismatchError(ToolkitError):
    """Personalized operation asked to run with a model from a different talker."""


class DataError(ToolkitError):
    """Semantically invalid data: missing directions, constant inputs, bad cells."""


class MissingCellsError(DataError):
    """Factorial rating aggregation found holes; ``missing`` lists them."""

    def __init__(self, message: str, missing: list[tuple]):
        super().__init__(message)
        self.missing = missing


class NumericError(ToolkitError):
    """Numerical routine left its supported regime (singular, non-finite)."""
