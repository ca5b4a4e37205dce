"""Exception types shared across the package."""
from __future__ import annotations


class PartlatError(Exception):
    """Base class for all package-specific errors."""


class LoadError(PartlatError):
    """A frame file could not be parsed.

    Carries the location of the first offending byte (binary inputs) or
    line (text inputs) so callers can point at the problem.
    """

    def __init__(self, message: str, *, path: str | None = None,
                 byte_offset: int | None = None, line: int | None = None):
        self.path = path
        self.byte_offset = byte_offset
        self.line = line
        where = []
        if path is not None:
            where.append(str(path))
        if byte_offset is not None:
            where.append(f"byte {byte_offset}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class EmptyPatchError(PartlatError):
    """A neighborhood query returned no particles where some are required."""


class InsufficientDataError(PartlatError):
    """Too few points for the requested computation."""


class UndefinedEstimateError(PartlatError):
    """Kernel regression at a point with zero total kernel weight."""


class SearchError(PartlatError):
    """Scalar minimization hit a non-finite objective value."""

    def __init__(self, message: str, *, x: float | None = None):
        self.x = x
        if x is not None:
            message = f"{message} (at x={x!r})"
        super().__init__(message)


class TrainingDivergedError(PartlatError):
    """Loss became non-finite during training.

    ``checkpoint`` holds the model state from the last completed epoch
    (or the initial state when the first epoch diverges).
    """

    def __init__(self, message: str, checkpoint=None, epoch: int | None = None):
        self.checkpoint = checkpoint
        self.epoch = epoch
        super().__init__(message)


class NotLeafError(PartlatError):
    """Attempted to split a cluster node that already has children."""


class RevokeOrderError(PartlatError):
    """Attempted to revoke a split whose children were split further."""


class TrackStallError(PartlatError):
    """Mean-shift step had no usable particles (empty region or all-zero weights)."""
