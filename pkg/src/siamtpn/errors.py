"""Exception types shared across the package."""


class SiamTPNError(Exception):
    """Base class for all package errors."""


class ShapeError(SiamTPNError, ValueError):
    pass


class NumericError(SiamTPNError, FloatingPointError):
    """A computation produced NaN or Inf."""


class DataError(SiamTPNError):
    """Malformed input data (frames, ground truth, weight files, configs)."""

    code = 2


class WeightsError(DataError):
    code = 20


class ManifestError(WeightsError):
    code = 21


class VersionMismatchError(WeightsError):
    code = 22


class ConfigMismatchError(WeightsError):
    code = 23


class TruncatedPayloadError(WeightsError):
    code = 24


class TrackingFailure(SiamTPNError):
    pass
