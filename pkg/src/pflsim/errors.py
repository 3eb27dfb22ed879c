"""Exception hierarchy shared across the simulator."""


class PflError(Exception):
    """Base class for all simulator errors."""


class DimensionError(PflError, ValueError):
    pass


class LabelError(PflError, ValueError):
    pass


class FormatError(PflError, ValueError):
    pass


class ConsistencyError(PflError, ValueError):
    pass


class CapacityError(PflError, ValueError):
    pass


class ConfigError(PflError, ValueError):
    pass


class UndefinedMetricsError(PflError, ValueError):
    pass


class NonFiniteError(PflError, ArithmeticError):
    pass


class DataIOError(PflError, OSError):
    pass
