"""Axis-aligned box geometry: IoU, analytic IoU gradients, and log-scale box transforms.

Boxes are corner-format ``(x0, y0, x1, y1)`` in continuous pixel coordinates.
All types are immutable values and every function is pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateBoxError


@dataclass(frozen=True)
class BoundingBox:
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    @property
    def is_valid(self) -> bool:
        return self.x1 > self.x0 and self.y1 > self.y0

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=float)

    @staticmethod
    def from_array(a: Sequence[float]) -> "BoundingBox":
        x0, y0, x1, y1 = (float(v) for v in a)
        return BoundingBox(x0, y0, x1, y1)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    cls_score: float
    loc_score: Optional[float] = None


@dataclass(frozen=True)
class GroundTruthBox:
    box: BoundingBox
    class_id: int
    object_id: int


@dataclass(frozen=True)
class BoxDelta:
    """Fast R-CNN style transform: center offsets over size, log size ratios."""

    dx: float
    dy: float
    dw: float
    dh: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=float)


def require_valid(box: BoundingBox, what: str = "box") -> None:
    if not box.is_valid:
        raise DegenerateBoxError(f"degenerate {what}: {box}")


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    w = min(a.x1, b.x1) - max(a.x0, b.x0)
    h = min(a.y1, b.y1) - max(a.y0, b.y0)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two valid boxes; 0 for interior-disjoint boxes."""
    require_valid(a)
    require_valid(b)
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (N, 4) / (M, 4) corner-format arrays."""
    a = np.asarray(boxes_a, dtype=float).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=float).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=inter > 0.0)
    return out


def iou_grad(a: BoundingBox, b_fixed: BoundingBox) -> np.ndarray:
    """Analytic ``d IoU(a, b) / d (a.x0, a.y0, a.x1, a.y1)`` holding ``b`` fixed.

    Returns the zero vector on the flat region where the boxes do not
    intersect.  At measure-zero edge-alignment points the one-sided
    derivative that treats ``a``'s edge as binding is returned.
    """
    require_valid(a)
    require_valid(b_fixed)
    wi = min(a.x1, b_fixed.x1) - max(a.x0, b_fixed.x0)
    hi = min(a.y1, b_fixed.y1) - max(a.y0, b_fixed.y0)
    if wi <= 0.0 or hi <= 0.0:
        return np.zeros(4)
    inter = wi * hi
    union = a.area + b_fixed.area - inter

    # d(intersection width)/d(a edge): the edge is binding when it lies
    # inside or exactly on b's corresponding interval end.
    dwi_dx0 = -1.0 if a.x0 >= b_fixed.x0 else 0.0
    dwi_dx1 = 1.0 if a.x1 <= b_fixed.x1 else 0.0
    dhi_dy0 = -1.0 if a.y0 >= b_fixed.y0 else 0.0
    dhi_dy1 = 1.0 if a.y1 <= b_fixed.y1 else 0.0

    di = np.array([dwi_dx0 * hi, dhi_dy0 * wi, dwi_dx1 * hi, dhi_dy1 * wi])
    darea = np.array([-a.height, -a.width, a.height, a.width])
    dunion = darea - di
    return (di * union - inter * dunion) / (union * union)


def encode_delta(src: BoundingBox, dst: BoundingBox) -> BoxDelta:
    """Transform parameters mapping ``src`` onto ``dst`` in log-scaled coordinates."""
    require_valid(src, "src box")
    if dst.width <= 0.0 or dst.height <= 0.0:
        raise DegenerateBoxError(f"degenerate dst box: {dst}")
    scx, scy = src.center
    dcx, dcy = dst.center
    return BoxDelta(
        dx=(dcx - scx) / src.width,
        dy=(dcy - scy) / src.height,
        dw=float(np.log(dst.width / src.width)),
        dh=float(np.log(dst.height / src.height)),
    )


def decode_delta(src: BoundingBox, d: BoxDelta) -> BoundingBox:
    """Apply a delta to ``src``; exact inverse of :func:`encode_delta`."""
    require_valid(src, "src box")
    cx = 0.5 * (src.x0 + src.x1) + d.dx * src.width
    cy = 0.5 * (src.y0 + src.y1) + d.dy * src.height
    w = src.width * float(np.exp(d.dw))
    h = src.height * float(np.exp(d.dh))
    return BoundingBox(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def scale_gradient(grad: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Scale a coordinate gradient by the box size on each axis.

    x-components are multiplied by width, y-components by height; this is the
    per-axis scaling that makes the refinement step size-free.
    """
    require_valid(box)
    g = np.asarray(grad, dtype=float)
    return g * np.array([box.width, box.height, box.width, box.height])
