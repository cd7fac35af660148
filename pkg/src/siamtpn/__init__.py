"""Siamese transformer pyramid tracker on a small numpy autodiff core."""
from .errors import (
    ConfigMismatchError,
    DataError,
    ManifestError,
    NumericError,
    ShapeError,
    SiamTPNError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .geometry import BBox, giou, iou
from .model import ModelConfig, SiamTPN
from .tracker import Tracker

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "ConfigMismatchError",
    "DataError",
    "ManifestError",
    "ModelConfig",
    "NumericError",
    "ShapeError",
    "SiamTPN",
    "SiamTPNError",
    "Tracker",
    "TruncatedPayloadError",
    "VersionMismatchError",
    "giou",
    "iou",
]
