"""Exception types raised across the package."""


class McdbaError(Exception):
    """Base class for all package errors."""


class ValidationError(McdbaError, ValueError):
    """Invalid configuration or input file contents."""


class AngleAtBranchCut(McdbaError):
    """Rotation angle too close to pi for a unique logarithm."""


class BehindCamera(McdbaError):
    """A point at or behind the camera plane was projected."""


class DuplicateTimestep(McdbaError):
    pass


class ChannelMismatch(McdbaError, ValueError):
    pass


class TooSmall(McdbaError, ValueError):
    pass


class ShapeMismatch(McdbaError, ValueError):
    pass


class EmptyEdgeList(McdbaError, ValueError):
    pass


class NoReferences(McdbaError, ValueError):
    pass


class UnknownEdge(McdbaError, KeyError):
    pass


class NoFreeVariables(McdbaError):
    pass


class NotPositiveDefinite(McdbaError):
    """Reduced camera system is not positive definite.

    ``pivot`` carries the smallest pivot seen by the factorization so the
    caller can decide how much extra damping to add.
    """

    def __init__(self, message: str, pivot: float):
        super().__init__(message)
        self.pivot = pivot


class MissingDepth(McdbaError, KeyError):
    pass


class MissingFrame(McdbaError, KeyError):
    pass


class StreamExhausted(McdbaError):
    pass


class NoValidPixels(McdbaError, ValueError):
    pass


class EmptyCamera(McdbaError, ValueError):
    pass


class LengthMismatch(McdbaError, ValueError):
    pass


class MismatchedFrames(McdbaError, ValueError):
    pass


class IoError(McdbaError, OSError):
    pass
