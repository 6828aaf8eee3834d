"""Exception hierarchy shared by all structvo modules."""


class StructVOError(Exception):
    """Base class for every error raised by structvo."""


# geometry
class NonPositiveDepth(StructVOError):
    pass


class SingularInput(StructVOError):
    pass


class FrameMismatch(StructVOError):
    pass


# normals / io
class DimensionMismatch(StructVOError):
    pass


class FrameNotFound(StructVOError, KeyError):
    pass


class CorruptInput(StructVOError):
    pass


class DatasetIOError(StructVOError, OSError):
    pass


# manhattan rotation
class OutsideCone(StructVOError):
    pass


class EmptyCluster(StructVOError):
    pass


class InsufficientSupport(StructVOError):
    """Fewer than two Manhattan axes are supported by the normal map."""


# two-view initialization
class DegenerateTranslation(StructVOError):
    """Translation direction is not observable (zero parallax or poor spread)."""


class TooFewCorrespondences(StructVOError):
    pass


class InitializationFailed(StructVOError):
    pass


# features / triangulation
class LowParallax(StructVOError):
    pass


class NegativeDepth(StructVOError):
    pass


class DegeneratePlane(StructVOError):
    pass


# tracking
class DegenerateLine(StructVOError):
    pass


class IllPosed(StructVOError):
    pass


class Diverged(StructVOError):
    pass


class TrackingLost(StructVOError):
    pass


# evaluation
class NoOverlap(StructVOError):
    pass


class DegenerateConfiguration(StructVOError):
    pass


# cli / config
class BadPreset(StructVOError, ValueError):
    pass


class ConfigError(StructVOError, ValueError):
    pass
