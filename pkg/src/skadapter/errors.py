"""Exception hierarchy shared across the package."""


class SKAdapterError(Exception):
    """Base class for all package errors."""


class SkeletonError(SKAdapterError, ValueError):
    pass


class MultipleRoots(SkeletonError):
    pass


class CycleDetected(SkeletonError):
    pass


class IndexOutOfRange(SkeletonError, IndexError):
    pass


class CoordinateOutOfBounds(SkeletonError):
    pass


class NonFiniteCoordinate(SkeletonError):
    pass


class InvalidJointCount(SkeletonError):
    pass


class ShapeMismatch(SKAdapterError, ValueError):
    pass


class NonFiniteValue(SKAdapterError, FloatingPointError):
    """Raised when a NaN or Inf shows up in a forward or backward pass."""


class NonFiniteGradient(NonFiniteValue):
    pass


class OutOfRange(SKAdapterError, ValueError):
    pass


class ConfigMismatch(SKAdapterError, ValueError):
    pass


class FrozenViolation(SKAdapterError, RuntimeError):
    """A frozen tensor changed during training."""


class MaskOutOfBounds(SKAdapterError, ValueError):
    pass


class DegenerateSkeleton(SKAdapterError, ValueError):
    pass


class DatasetError(SKAdapterError):
    pass


class BadMagic(DatasetError):
    pass


class VersionMismatch(DatasetError):
    pass


class CorruptSample(DatasetError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"sample {index}: {reason}")
        self.index = index


class CheckpointError(SKAdapterError):
    pass


class EmptySet(SKAdapterError, ValueError):
    pass


class EmptyOccupancy(SKAdapterError, ValueError):
    pass


class ResolutionMismatch(SKAdapterError, ValueError):
    pass


class SkeletonParseError(SKAdapterError, ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
