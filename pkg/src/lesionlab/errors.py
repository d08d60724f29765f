"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`LesionLabError`.
``ValidationError`` subclasses map to CLI exit code 2, ``MissingArtifactError``
subclasses to exit code 3.
"""


class LesionLabError(Exception):
    pass


class ValidationError(LesionLabError, ValueError):
    pass


class MissingArtifactError(LesionLabError, FileNotFoundError):
    pass


# data_manifest
class MissingImage(MissingArtifactError):
    pass


class AmbiguousLabel(ValidationError):
    pass


class DuplicateSample(ValidationError):
    pass


class ClassTooSmall(ValidationError):
    pass


class CountOutOfRange(ValidationError):
    pass


class EmptyClass(ValidationError):
    pass


class MaskShapeMismatch(ValidationError):
    pass


# engines
class UnknownBackbone(ValidationError, KeyError):
    pass


class CheckpointShapeMismatch(ValidationError):
    pass


class CheckpointUnreadable(LesionLabError, OSError):
    pass


class MissingMasks(ValidationError):
    pass


class DivergedTraining(LesionLabError, RuntimeError):
    pass


class ImageTooSmall(ValidationError):
    pass


# crop_tool
class MissingPredictedMask(MissingArtifactError):
    pass


class IoFailure(LesionLabError, OSError):
    pass


# metrics
class DimensionMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class LabelOutOfRange(ValidationError):
    pass


class NoSamples(ValidationError):
    pass


# pipeline
class MissingUpstreamArtifact(MissingArtifactError):
    pass


class ConfigHashMismatch(ValidationError):
    pass


class SampleSetMismatch(ValidationError):
    pass
