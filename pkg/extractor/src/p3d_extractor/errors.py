"""Error taxonomy shared by every extractor module.

Exit-code mapping (mirrors the evaluation engine's CLI conventions):

* 2 — bad invocation or configuration (``ConfigError``),
* 3 — bad or missing input data (``DataError`` and subclasses),
* 4 — unexpected internal failure.
"""

from __future__ import annotations

__all__ = [
    "ExtractorError",
    "ConfigError",
    "DataError",
    "FormatError",
    "SchemaError",
    "CorruptionError",
    "MissingCheckpointError",
    "PlotError",
]


class ExtractorError(Exception):
    """Base class for every error this package raises on purpose."""

    exit_code = 4


class ConfigError(ExtractorError):
    """The caller asked for something contradictory or unknown."""

    exit_code = 2


class DataError(ExtractorError):
    """Input files are missing, malformed, or inconsistent."""

    exit_code = 3


class FormatError(DataError):
    """A binary or structured file does not match its declared format."""


class SchemaError(DataError):
    """A dataset source tree does not match the documented layout."""


class CorruptionError(FormatError):
    """A file's declared sizes disagree with its actual bytes."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MissingCheckpointError(DataError):
    """A model's checkpoint is not in the local cache."""


class PlotError(DataError):
    """A report CSV cannot be rendered as a figure."""
