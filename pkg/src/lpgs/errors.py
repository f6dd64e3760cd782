"""Exception types shared across the engine.

Every failure mode callers are expected to handle has a named class so that
CLI commands and tests can match on the type rather than on message text.
"""


class LpgsError(Exception):
    """Base class for all engine errors."""


class InvalidConfig(LpgsError):
    pass


class DimensionMismatch(LpgsError):
    pass


class OutOfUnitCube(LpgsError):
    pass


class DegeneratePointCloud(LpgsError):
    pass


class OutOfBox(LpgsError):
    pass


class DegenerateQuaternion(LpgsError):
    pass


class StaleCache(LpgsError):
    pass


class SingularCovariance(LpgsError):
    pass


class NonFiniteLoss(LpgsError):
    pass


class UnknownGroup(LpgsError):
    pass


class EmptyScene(LpgsError):
    pass


class IOFailure(LpgsError):
    pass


class BadMagic(LpgsError):
    pass


class VersionMismatch(LpgsError):
    pass


class ChecksumMismatch(LpgsError):
    pass


class TruncatedSection(LpgsError):
    pass


class UnsupportedPLY(LpgsError):
    pass


class MalformedHeader(LpgsError):
    pass


class DatasetError(LpgsError):
    pass
