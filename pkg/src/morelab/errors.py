"""Exception types shared across the package."""


class MoreLabError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(MoreLabError):
    pass


class LabelOutOfRange(MoreLabError):
    pass


class DisconnectedTensor(MoreLabError):
    pass


class NonFiniteValue(MoreLabError):
    """NaN or Inf encountered at an op boundary."""


class NonFiniteGradient(MoreLabError):
    pass


class InvalidArch(MoreLabError):
    pass


class InvalidParams(MoreLabError):
    pass


class EmptyDataset(MoreLabError):
    pass


class EmptyRotation(MoreLabError):
    pass


class GradientUnavailable(MoreLabError):
    pass


class BadMagic(MoreLabError):
    pass


class VersionMismatch(MoreLabError):
    pass


class HashMismatch(MoreLabError):
    pass


class TruncatedFile(MoreLabError):
    pass


class CountMismatch(MoreLabError):
    pass


class ConfigParse(MoreLabError):
    pass


class StageFailure(MoreLabError):
    """Wraps a module error with the name of the pipeline stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
