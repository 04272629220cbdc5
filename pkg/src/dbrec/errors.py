"""Exception types shared across the package."""


class DBRecError(Exception):
    """Base class for all errors raised by this package."""


class GraphError(DBRecError):
    """Graph construction problem: incompatible shapes or bad op wiring."""


class NumericError(DBRecError):
    """A computation produced NaN/Inf or otherwise left the finite domain."""


class UsageError(DBRecError):
    """An API was called outside its contract."""


class ConfigError(DBRecError):
    """Invalid or inconsistent configuration values."""


class DataError(DBRecError):
    """Malformed input data or an unsatisfiable data operation."""


class IntegrityError(DBRecError):
    """A stored artifact is corrupt, truncated, or version-incompatible."""


class ProtocolError(DBRecError):
    """An evaluation-protocol precondition was violated."""
