"""Exception types raised across the simulator."""


class S2FLError(Exception):
    """Base class for all simulator errors."""


class ShapeError(S2FLError, ValueError):
    pass


class InvalidSplitError(S2FLError, ValueError):
    pass


class PartitionError(S2FLError, RuntimeError):
    pass


class CoverageError(S2FLError, ValueError):
    pass


class ConfigError(S2FLError, ValueError):
    pass


class DomainError(S2FLError, ValueError):
    pass
