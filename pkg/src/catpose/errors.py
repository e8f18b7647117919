"""Exception types shared across the pipeline."""


class CatposeError(Exception):
    """Base class for all library errors."""


class FormatError(CatposeError):
    """Malformed file content. Carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(CatposeError):
    """Inputs violate a documented precondition or invariant."""


class DegenerateGeometryError(CatposeError):
    """Point configuration too thin for a unique solution (collinear, empty, ...)."""


class NoConsensusError(CatposeError):
    """Robust fitting found no hypothesis with enough inliers."""


class EmptyCloudError(CatposeError):
    """An operation produced or received a point cloud with no valid points."""


class EstimationFailedError(CatposeError):
    """Pose estimation failed on every view; carries per-view diagnostics."""

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class ProviderError(CatposeError):
    """A feature provider misbehaved (bad response, missing file, dead process)."""


class OptimizationAbort(CatposeError):
    """Refinement hit a non-finite loss; carries the state dump."""

    def __init__(self, message: str, state_dump=None):
        super().__init__(message)
        self.state_dump = state_dump
