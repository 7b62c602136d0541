"""Exception hierarchy.

Every error this package raises on purpose derives from LaneDetectError,
so callers can catch one type at the CLI boundary.  Each leaf also
derives from the closest builtin so generic handlers keep working.
"""


class LaneDetectError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LaneDetectError, ValueError):
    """Tensor rank or dimensions do not match what an operation needs."""


class SizeError(LaneDetectError, ValueError):
    """A requested allocation would overflow the platform index type."""


class DomainError(LaneDetectError, ValueError):
    """A value is outside its legal range (probabilities, rates, thresholds)."""


class DataError(LaneDetectError, ValueError):
    """Dataset content is malformed or numerically unusable."""


class AnnotationError(DataError):
    """An annotation file line could not be parsed.

    Carries the offending path and 1-based line number so dataset
    problems can be pinpointed without a debugger.
    """

    def __init__(self, message, path=None, line=None):
        detail = message
        if path is not None:
            detail = f"{path}:{line}: {message}" if line is not None else f"{path}: {message}"
        super().__init__(detail)
        self.path = path
        self.line = line


class CheckpointError(LaneDetectError, ValueError):
    """A checkpoint file is truncated, corrupt, or from an unknown format."""


class BackendError(LaneDetectError, RuntimeError):
    """The requested compute backend is unavailable or misconfigured."""


class TrainingDiverged(LaneDetectError, RuntimeError):
    """Training produced non-finite loss or gradients and was aborted."""
