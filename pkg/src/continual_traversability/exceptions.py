class TraversabilityError(Exception):
    pass


class ConfigurationError(TraversabilityError):
    """Invalid configuration; ``key`` names the offending dotted key."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class GeometryError(TraversabilityError):
    pass


class ScenarioError(TraversabilityError):
    pass


class SessionFormatError(TraversabilityError):
    """Recorded session could not be decoded."""

    def __init__(self, message, frame_index=None):
        if frame_index is not None:
            message = "frame {}: {}".format(frame_index, message)
        super().__init__(message)
        self.frame_index = frame_index


class MalformedHeaderError(SessionFormatError):
    pass


class TruncatedSessionError(SessionFormatError):
    pass


class ShapeMismatchError(SessionFormatError):
    pass


class NonFiniteFeaturesError(SessionFormatError):
    pass


class SegmentationError(TraversabilityError):
    pass


class AnnotationError(TraversabilityError):
    pass


class NoTraversableEvidenceError(AnnotationError):
    pass


class ReplayMemoryError(TraversabilityError):
    pass


class LearnerError(TraversabilityError):
    pass


class NonFiniteLossError(LearnerError):
    """Training produced a non-finite loss or parameter."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointFormatError(TraversabilityError):
    pass


class MetricError(TraversabilityError):
    pass


class ExperimentError(TraversabilityError):
    """Runtime failure inside an experiment, tagged with the frame index."""

    def __init__(self, message, frame_index=None):
        if frame_index is not None:
            message = "frame {}: {}".format(frame_index, message)
        super().__init__(message)
        self.frame_index = frame_index
