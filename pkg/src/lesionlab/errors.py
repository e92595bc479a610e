"""Exception hierarchy shared by every pipeline stage."""


class LesionLabError(Exception):
    """Base class for all pipeline errors."""


# --- data ingestion / manifests ---

class MissingColumn(LesionLabError):
    pass


class EmptyManifest(LesionLabError):
    pass


class DuplicateId(LesionLabError):
    pass


class RatioSum(LesionLabError):
    pass


class ClassTooSmall(LesionLabError):
    pass


class UnknownLabel(LesionLabError):
    pass


class IoFailure(LesionLabError):
    pass


# --- pixel pipelines ---

class BadTarget(LesionLabError):
    pass


class RangeTagMismatch(LesionLabError):
    pass


# --- networks / training ---

class BadSpec(LesionLabError):
    pass


class InsufficientData(LesionLabError):
    pass


class Diverged(LesionLabError):
    """Training produced a non-finite loss.

    Carries the last finite-loss checkpoint so callers can salvage it.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class WeightsUnavailable(LesionLabError):
    pass


class EmptySplit(LesionLabError):
    pass


class ShapeMismatch(LesionLabError):
    pass


# --- balancing ---

class CheckpointMismatch(LesionLabError):
    pass


class MissingCheckpoint(LesionLabError):
    pass


# --- metrics ---

class EmptyMatrix(LesionLabError):
    pass


class DegenerateLabels(LesionLabError):
    pass


# --- explanations ---

class ModelCallFailure(LesionLabError):
    pass


# --- orchestration ---

class ConfigError(LesionLabError):
    pass


class StaleUpstream(LesionLabError):
    pass
