"""Boxes, crop windows and score-map point layout."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: center and size in pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.w > 0 and self.h > 0) or not all(map(math.isfinite, (self.cx, self.cy, self.w, self.h))):
            raise ValueError(f"degenerate box {self}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        """From top-left corner plus size (the groundtruth.txt convention)."""
        return cls(x + w / 2.0, y + h / 2.0, w, h)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h


def _overlap(a: BBox, b: BBox) -> tuple[float, float, float]:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    # areas from the same corners as the overlap, so iou(a, a) == 1 exactly
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    enclose = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter, union, enclose


def iou(a: BBox, b: BBox) -> float:
    inter, union, _ = _overlap(a, b)
    return inter / union


def giou(a: BBox, b: BBox) -> float:
    """IoU minus the fraction of the enclosing box not covered by the union; in [-1, 1]."""
    inter, union, enclose = _overlap(a, b)
    return inter / union - (enclose - union) / enclose


def center_error(a: BBox, b: BBox) -> float:
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


SEARCH_AREA_FACTOR = 4.0
TEMPLATE_AREA_FACTOR = 1.5


@dataclass(frozen=True)
class CropGeometry:
    """Square window of ``side`` image pixels centered at (cx, cy), resampled to ``out_res``."""

    cx: float
    cy: float
    side: float
    out_res: int

    @classmethod
    def around(cls, box: BBox, factor: float, out_res: int) -> "CropGeometry":
        """Side = factor * sqrt(w*h), so the crop area is factor^2 times the box area."""
        return cls(box.cx, box.cy, factor * math.sqrt(box.w * box.h), out_res)

    @property
    def scale(self) -> float:
        """Crop pixels per image pixel."""
        return self.out_res / self.side

    @property
    def origin(self) -> tuple[float, float]:
        return (self.cx - self.side / 2.0, self.cy - self.side / 2.0)

    def to_image(self, x: float, y: float) -> tuple[float, float]:
        ox, oy = self.origin
        return ox + x / self.scale, oy + y / self.scale

    def to_crop(self, x: float, y: float) -> tuple[float, float]:
        ox, oy = self.origin
        return (x - ox) * self.scale, (y - oy) * self.scale

    def box_to_crop(self, box: BBox) -> BBox:
        cx, cy = self.to_crop(box.cx, box.cy)
        return BBox(cx, cy, box.w * self.scale, box.h * self.scale)

    def box_to_image(self, box: BBox) -> BBox:
        cx, cy = self.to_image(box.cx, box.cy)
        return BBox(cx, cy, box.w / self.scale, box.h / self.scale)


@dataclass(frozen=True)
class MapGeometry:
    """Where each score-map cell sits in search-crop pixels.

    Cell (i, j) maps to crop point (first + j*stride, first + i*stride); the
    map is centered on the crop, so for a 12x12 map on a 256 crop with
    stride 16 the first point is 40 = (0 + 2 + 0.5) * 16.
    """

    rows: int
    cols: int
    stride: float
    extent: int

    @property
    def first_x(self) -> float:
        return self.extent / 2.0 - (self.cols - 1) / 2.0 * self.stride

    @property
    def first_y(self) -> float:
        return self.extent / 2.0 - (self.rows - 1) / 2.0 * self.stride

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        """(px, py) arrays of shape (rows, cols)."""
        xs = self.first_x + np.arange(self.cols) * self.stride
        ys = self.first_y + np.arange(self.rows) * self.stride
        return np.meshgrid(xs, ys)
