"""Exception taxonomy shared by every module.

The CLI maps these onto exit codes: ConfigError and FormatError exit 2,
NumericError exits 3, everything else is a plain crash.
"""


class CdonError(Exception):
    """Base class for all library errors."""


class DimensionError(CdonError):
    """Operands have incompatible or malformed shapes."""


class NumericError(CdonError):
    """A computation produced NaN/Inf or was fed non-finite values."""


class UsageError(CdonError):
    """An operation was called in a way its contract forbids."""


class ConfigError(CdonError):
    """Invalid, inconsistent or unknown configuration."""


class FormatError(CdonError):
    """A serialized artifact (checkpoint, config file) is malformed."""


class DegenerateRoIError(CdonError):
    """An RoI collapsed to zero area after projection and clamping."""
