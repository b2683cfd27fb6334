"""Exception hierarchy.

Every error raised on purpose by this package derives from SkiffError, so
callers can catch one type at the boundary. The CLI maps subtypes to exit
codes: usage problems exit 1, bad input data exits 2, numeric failures
exit 3.
"""


class SkiffError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SkiffError):
    """Array arguments have incompatible or unexpected shapes."""


class ConfigError(SkiffError):
    """A configuration value is out of range or inconsistent with others."""


class InputError(SkiffError):
    """A single input record is malformed (bad JSON, unknown key, ...)."""


class DataError(SkiffError):
    """A data file is corrupt or inconsistent (checksum, magic, alignment)."""


class StateError(SkiffError):
    """An operation was called in the wrong order or on stale state."""


class NumericError(SkiffError):
    """A computation produced non-finite values or failed verification."""


class CapabilityError(SkiffError):
    """A requested feature combination is not supported."""
