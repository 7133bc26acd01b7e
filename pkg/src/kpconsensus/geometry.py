"""Axis-aligned box arithmetic and coordinate transforms.

Boxes are real-valued ``(x, y, w, h)`` rectangles with the origin at the
top-left of the image, x growing rightward and y downward. Intersections
use closed intervals, so boxes that merely touch have zero overlap area
but a point on the boundary is inside.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

MIN_BOX_SIDE = 1.0
CROP_SIDE = 227
CROP_BUFFER = 16


class Point(NamedTuple):
    x: float
    y: float


class NormalizedPoint(NamedTuple):
    """Box-relative coordinates: (0, 0) is the top-left corner, (1, 1) the bottom-right."""

    u: float
    v: float


@dataclass(frozen=True)
class Rect:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        for name in ("x", "y", "w", "h"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"Rect.{name} must be finite, got {getattr(self, name)!r}")
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"Rect must have positive size, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Rect":
        return cls(float(x1), float(y1), float(x2 - x1), float(y2 - y1))

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> Point:
        return Point(self.x + self.w / 2.0, self.y + self.h / 2.0)

    def contains_point(self, p: Point) -> bool:
        return self.x <= p[0] <= self.x2 and self.y <= p[1] <= self.y2

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


def intersection_area(a: Rect, b: Rect) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: Rect, b: Rect) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return min(1.0, inter / (a.area + b.area - inter))


def containment_fraction(inner: Rect, outer: Rect) -> float:
    """Fraction of ``inner``'s area that lies inside ``outer``."""
    return intersection_area(inner, outer) / inner.area


def tightest_box(points: Iterable[Point], min_side: float = MIN_BOX_SIDE) -> Rect:
    """Smallest axis-aligned box containing every point.

    A side that would collapse to zero length (single point, or points
    sharing an x or y coordinate) is widened to ``min_side`` from the
    minimum coordinate, so the result is always a valid box.

    Raises:
        ValueError: if ``points`` is empty.
    """
    pts = np.asarray(list(points), dtype=float)
    if pts.size == 0:
        raise ValueError("no points")
    pts = pts.reshape(-1, 2)
    x1, y1 = pts.min(axis=0)
    x2, y2 = pts.max(axis=0)
    w = _span(float(x1), float(x2), min_side)
    h = _span(float(y1), float(y2), min_side)
    return Rect(float(x1), float(y1), w, h)


def _span(lo: float, hi: float, min_side: float) -> float:
    """Side length from ``lo`` reaching at least ``hi`` after float rounding."""
    if not hi - lo > 0:
        return min_side
    s = hi - lo
    while lo + s < hi:
        s = math.nextafter(s, math.inf)
    return s


def union_box(boxes: Iterable[Rect]) -> Rect:
    """Tightest box enclosing every given box."""
    boxes = list(boxes)
    if not boxes:
        raise ValueError("no boxes")
    return Rect.from_corners(
        min(b.x for b in boxes),
        min(b.y for b in boxes),
        max(b.x2 for b in boxes),
        max(b.y2 for b in boxes),
    )


def pad_box(b: Rect, crop_side: float = CROP_SIDE, buffer: float = CROP_BUFFER) -> Rect:
    """Grow ``b`` about its center so it fills only the central part of a warped crop.

    After warping the returned box to ``crop_side`` x ``crop_side`` pixels,
    the original box occupies the central ``crop_side - 2 * buffer`` square,
    leaving ``buffer`` pixels of context on every side.
    """
    if not crop_side > 2 * buffer:
        raise ValueError(f"crop_side ({crop_side}) must exceed twice the buffer ({buffer})")
    inner = crop_side - 2.0 * buffer
    # per-side growth: side * buffer / inner, i.e. scaling by crop_side / inner
    dx, dy = b.w * buffer / inner, b.h * buffer / inner
    return Rect(b.x - dx, b.y - dy, b.w + 2.0 * dx, b.h + 2.0 * dy)


def to_normalized(p: Point, box: Rect) -> NormalizedPoint:
    return NormalizedPoint((p[0] - box.x) / box.w, (p[1] - box.y) / box.h)


def to_image(n: NormalizedPoint, box: Rect) -> Point:
    return Point(box.x + n[0] * box.w, box.y + n[1] * box.h)


def boxes_to_array(boxes: Iterable[Rect]) -> np.ndarray:
    """Stack boxes as an ``(n, 4)`` array of ``x, y, w, h``."""
    arr = np.array([b.as_list() for b in boxes], dtype=float)
    return arr.reshape(-1, 4)
