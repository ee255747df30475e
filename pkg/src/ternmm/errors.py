"""Exception taxonomy shared across the toolkit.

Every error raised by this package derives from TernmmError so callers
(notably the CLI) can map failures to exit categories without string
matching.
"""


class TernmmError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(TernmmError):
    """Dimension mismatch; message names the offending shapes."""


class DataError(TernmmError):
    """Invalid values: non-finite inputs, out-of-range ids, bad image data."""


class ConfigError(TernmmError):
    """Inconsistent or unsupported model configuration."""


class FormatError(TernmmError):
    """Malformed container file or checkpoint structure."""


class CorruptionError(FormatError):
    """Packed ternary payload contains a forbidden code."""


class CapacityError(TernmmError):
    """Context or cache would exceed the configured maximum length."""
