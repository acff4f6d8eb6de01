"""Exception types raised across the package."""


class SlamncError(Exception):
    """Base class for all package errors."""


class DegenerateGravity(SlamncError, ValueError):
    pass


class NonMonotonicTime(SlamncError, ValueError):
    pass


class InvalidDataPoint(SlamncError, ValueError):
    pass


class EmptyNeighborhood(SlamncError, ValueError):
    pass


class InvalidConfig(SlamncError, ValueError):
    pass


class NonFiniteResidual(SlamncError, ValueError):
    pass


class AllZeroWeights(SlamncError, RuntimeError):
    """Every particle weight underflowed to zero."""


class Divergence(SlamncError, RuntimeError):
    """The particle filter diverged at time ``t``."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class InputOrder(SlamncError, ValueError):
    pass


class TooCloseToSource(SlamncError, ValueError):
    pass


class DegenerateHorizontalField(SlamncError, ValueError):
    pass


class DegenerateGeometry(SlamncError, ValueError):
    pass


class ParseError(SlamncError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SchemaError(SlamncError, ValueError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing columns: " + ", ".join(self.missing))
