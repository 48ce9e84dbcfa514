"""Exception hierarchy shared by the filter, simulator and benchmark."""


class PLCVIOError(Exception):
    """Base class for every error raised by this package."""


class DegenerateLine(PLCVIOError):
    pass


class DimensionMismatch(PLCVIOError, ValueError):
    pass


class WindowFull(PLCVIOError):
    pass


class EmptyWindow(PLCVIOError):
    pass


class NonMonotonicTime(PLCVIOError, ValueError):
    pass


class EmptyBatch(PLCVIOError, ValueError):
    pass


class ConsistencyError(PLCVIOError):
    """Covariance lost symmetry or positive semi-definiteness."""


class BehindCamera(PLCVIOError):
    pass


class DegenerateProjection(PLCVIOError):
    pass


class InsufficientParallax(PLCVIOError):
    pass


class GateRejected(PLCVIOError):
    """A triangulated feature failed one of the outlier gates.

    ``gate`` names the failing check so callers can tally rejections.
    """

    def __init__(self, gate, message=""):
        super().__init__(f"{gate}: {message}" if message else gate)
        self.gate = gate


class MissingClone(PLCVIOError, KeyError):
    pass


class RankDeficientFeature(PLCVIOError):
    pass


class FeatureMismatch(PLCVIOError, ValueError):
    pass


class SingularInnovation(PLCVIOError):
    pass


class LengthMismatch(PLCVIOError, ValueError):
    pass


class OutOfRange(PLCVIOError, ValueError):
    pass


class ConfigError(PLCVIOError, ValueError):
    pass
