"""Exception types raised across the package."""


class SkelebonesError(Exception):
    """Base class for all package errors."""


class ShapeError(SkelebonesError, ValueError):
    pass


class DegenerateConfiguration(SkelebonesError, ValueError):
    pass


class InvalidWeights(SkelebonesError, ValueError):
    pass


class InconsistentTopology(SkelebonesError, ValueError):
    pass


class SequenceIOError(SkelebonesError, OSError):
    """A frame file could not be read. ``frame`` holds the offending frame index."""

    def __init__(self, message, frame=None):
        super().__init__(message)
        self.frame = frame


class CorruptArchive(SkelebonesError, ValueError):
    """A rig archive failed validation. ``check`` names the failed check."""

    def __init__(self, check, detail=""):
        super().__init__(f"{check}: {detail}" if detail else check)
        self.check = check


class ClusteringFailed(SkelebonesError, RuntimeError):
    pass


class DegenerateCluster(SkelebonesError, ValueError):
    def __init__(self, cluster, detail=""):
        super().__init__(f"cluster {cluster} is degenerate {detail}".strip())
        self.cluster = cluster


class ContractionFailed(SkelebonesError, RuntimeError):
    def __init__(self, iteration, detail=""):
        super().__init__(f"contraction diverged at iteration {iteration} {detail}".strip())
        self.iteration = iteration


class SingleBoneSkeleton(SkelebonesError):
    """No weight transitions and no branches: the rig reduces to a root-only tree."""


class SolverDiverged(SkelebonesError, RuntimeError):
    def __init__(self, message, last_pose=None):
        super().__init__(message)
        self.last_pose = last_pose


class EmptyPointSet(SkelebonesError, ValueError):
    pass


class InsufficientFrames(SkelebonesError, ValueError):
    pass


class UsageError(SkelebonesError, ValueError):
    pass


class StageFailed(SkelebonesError, RuntimeError):
    """A pipeline stage raised. ``stage`` names it; ``partial`` holds outputs of the stages before it."""

    def __init__(self, stage, cause, partial=None):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.partial = partial or {}
