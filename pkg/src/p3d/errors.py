"""Exception hierarchy shared across the engine.

Every error raised on a validated code path derives from P3DError so the
command line layer can map failures onto stable exit codes:

    ConfigError   -> exit 2 (bad flags, inconsistent configuration)
    DataError     -> exit 3 (missing/malformed inputs, corrupt files)
    NumericError  -> exit 4 (non-finite values where finites are required)
"""


class P3DError(Exception):
    """Base class for engine errors."""


class ConfigError(P3DError):
    """Invalid or inconsistent configuration."""


class ShapeError(ConfigError):
    """Operands with incompatible shapes; message names both shapes."""


class DataError(P3DError):
    """Missing, malformed, or inconsistent input data."""


class FormatError(DataError):
    """A serialized file does not follow its declared layout."""


class CorruptionError(FormatError):
    """A serialized file is structurally damaged.

    ``offset`` is the byte position at which the damage was detected.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateInputError(DataError):
    """Input is structurally valid but carries no usable signal.

    Examples: an all-invalid mask, a constant vector handed to a
    correlation, a depth map with no spread to normalize.
    """


class NumericError(P3DError):
    """A computation produced or received non-finite values."""
