"""Exception hierarchy shared by all seqfit modules."""


class SeqfitError(Exception):
    """Base class for every error raised by seqfit."""


class InvalidInputError(SeqfitError, ValueError):
    """Malformed or inconsistent input (dimension mismatch, bad file, ...)."""


class DegenerateProjectionError(SeqfitError):
    """A point lies on or behind the camera plane."""

    def __init__(self, joint: int, depth: float, frame: int | None = None):
        self.frame = frame
        self.joint = joint
        self.depth = depth
        where = f"joint {joint}" if frame is None else f"frame {frame}, joint {joint}"
        super().__init__(f"degenerate projection at {where}: depth {depth:.3g} m")


class InitFailure(SeqfitError):
    """Camera depth initialization impossible for a frame."""


class EvaluationError(SeqfitError):
    """Objective or gradient evaluated to a non-finite value."""


class MetricUnavailable(SeqfitError):
    """Metric preconditions not met (e.g. volume of an open mesh)."""
