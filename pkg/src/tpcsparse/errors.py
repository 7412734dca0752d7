"""Exception hierarchy shared by every module."""


class TpcSparseError(Exception):
    """Base class for all package errors."""


class EmptyEvent(TpcSparseError):
    pass


class InvalidPoint(TpcSparseError, ValueError):
    pass


class ShapeError(TpcSparseError, ValueError):
    pass


class CoordRangeError(TpcSparseError, ValueError):
    """Lattice coordinate does not fit the 16-bit packed key."""


class CheckpointError(TpcSparseError):
    pass


class NumericsError(TpcSparseError, ArithmeticError):
    pass


class LabelError(TpcSparseError, ValueError):
    pass


class ConfigError(TpcSparseError, ValueError):
    pass


class FormatError(TpcSparseError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TaskError(TpcSparseError, ValueError):
    pass


class DegenerateData(TpcSparseError, ValueError):
    pass


class UsageError(TpcSparseError, ValueError):
    """Bad command-line usage (exit code 2)."""
