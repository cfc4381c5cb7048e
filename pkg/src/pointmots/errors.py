"""Exception types shared across the package."""


class PointMotsError(Exception):
    pass


class MalformedRle(PointMotsError, ValueError):
    pass


class DimensionMismatch(PointMotsError, ValueError):
    pass


class EmptyMask(PointMotsError, ValueError):
    pass


class ClassOutOfRange(PointMotsError, ValueError):
    pass


class ShapeMismatch(PointMotsError, ValueError):
    pass


class VersionMismatch(PointMotsError, ValueError):
    pass


class CorruptFile(PointMotsError, ValueError):
    pass


class InsufficientTracks(PointMotsError, ValueError):
    pass


class SingleIdentityBatch(PointMotsError, ValueError):
    pass


class NonMonotonicFrame(PointMotsError, ValueError):
    pass


class OverlappingMasks(PointMotsError, ValueError):
    pass


class EmptyGroundTruth(PointMotsError, ValueError):
    pass
