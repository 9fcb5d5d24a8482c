"""Geometric primitives: bounding boxes, IoU, and clamping.

Coordinates are normalized to [0, 1] (resolution-independent); boxes are
closed axis-aligned rectangles, so touching edges have IoU 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DegenerateBox


@dataclass(frozen=True)
class Box:
    """One rated or fused bounding box.

    class_id indexes the manifest's label_names; rater_id identifies the
    annotator that drew the box (None for fused or model boxes).
    """

    class_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: float = 1.0
    rater_id: str | None = None

    def __post_init__(self):
        if self.class_id < 0:
            raise DegenerateBox(f"class_id must be >= 0, got {self.class_id}")
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise DegenerateBox(f"non-finite coordinates {coords}")
        if not all(0.0 <= c <= 1.0 for c in coords):
            raise DegenerateBox(f"coordinates outside [0,1]: {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DegenerateBox(f"zero or negative extent: {coords}")
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise DegenerateBox(f"score outside [0,1]: {self.score}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes; 0 when interiors are disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def iou_xyxy(
    ax0: float, ay0: float, ax1: float, ay1: float,
    bx0: float, by0: float, bx1: float, by1: float,
) -> float:
    """IoU on raw coordinates, for callers that keep boxes as plain floats."""
    ix = min(ax1, bx1) - max(ax0, bx0)
    iy = min(ay1, by1) - max(ay0, by0)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def clip_box(
    class_id: int,
    x_min: float,
    y_min: float,
    x_max: float,
    y_max: float,
    score: float = 1.0,
    rater_id: str | None = None,
) -> Box:
    """Clamp raw coordinates to [0,1] and construct a Box.

    Raises DegenerateBox when clamping collapses the box to zero area.
    """
    x0 = min(max(x_min, 0.0), 1.0)
    y0 = min(max(y_min, 0.0), 1.0)
    x1 = min(max(x_max, 0.0), 1.0)
    y1 = min(max(y_max, 0.0), 1.0)
    if not (x0 < x1 and y0 < y1):
        raise DegenerateBox(
            f"box ({x_min},{y_min},{x_max},{y_max}) collapsed to zero area after clamping"
        )
    return Box(class_id, x0, y0, x1, y1, score=score, rater_id=rater_id)
