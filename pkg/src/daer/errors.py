"""Exception hierarchy shared by every module."""


class DaerError(Exception):
    """Base class for all package errors."""


class ShapeError(DaerError, ValueError):
    """Input arrays have incompatible shapes or dimensions."""


class DegenerateError(DaerError, ValueError):
    """A computation hit a degenerate value (zero norm, non-finite entries)."""


class ConfigError(DaerError, ValueError):
    """Unknown or invalid configuration key/value."""


class DecodeError(DaerError):
    """A binary file is malformed: bad magic, version, or truncation."""
