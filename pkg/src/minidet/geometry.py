"""Axis-aligned box arithmetic, IoU, geometric transforms, and NMS primitives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in continuous pixel coordinates, corner-encoded."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 <= self.x1 and self.y0 <= self.y1):
            raise ValueError(f"invalid box corners: {self}")

    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def width(self) -> float:
        return self.x1 - self.x0

    def height(self) -> float:
        return self.y1 - self.y0

    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def as_xywh(self) -> list[float]:
        return [self.x0, self.y0, self.x1 - self.x0, self.y1 - self.y0]

    @staticmethod
    def from_xywh(x: float, y: float, w: float, h: float) -> "Box":
        return Box(x, y, x + w, y + h)


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes.

    Zero-area boxes have IoU 0 with everything except an exactly equal box,
    which scores 1 (avoids 0/0 while keeping identity reflexive).
    """
    if a == b:
        return 1.0
    ix0 = max(a.x0, b.x0)
    iy0 = max(a.y0, b.y0)
    ix1 = min(a.x1, b.x1)
    iy1 = min(a.y1, b.y1)
    iw = ix1 - ix0
    ih = iy1 - iy0
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def intersection_box(a: Box, b: Box) -> Box | None:
    """Overlap region of two boxes, or None when they are disjoint."""
    ix0 = max(a.x0, b.x0)
    iy0 = max(a.y0, b.y0)
    ix1 = min(a.x1, b.x1)
    iy1 = min(a.y1, b.y1)
    if ix1 <= ix0 or iy1 <= iy0:
        return None
    return Box(ix0, iy0, ix1, iy1)


def boxes_to_array(boxes) -> np.ndarray:
    """Stack boxes into an (n, 4) float array of x0, y0, x1, y1."""
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([[b.x0, b.y0, b.x1, b.y1] for b in boxes], dtype=np.float64)


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU between two box lists, (len_a, len_b).

    Matches `iou` including the degenerate-box rule.
    """
    a = boxes_to_array(boxes_a)
    b = boxes_to_array(boxes_b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.clip(ix1 - ix0, 0.0, None)
    ih = np.clip(iy1 - iy0, 0.0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.where((inter > 0.0) & (union > 0.0), inter / np.where(union > 0, union, 1.0), 0.0)
    equal = np.all(a[:, None, :] == b[None, :, :], axis=2)
    out[equal] = 1.0
    return out


@dataclass(frozen=True)
class Transform:
    """Invertible geometric transform on boxes.

    kind is one of "scale" (uniform factor), "hflip" (mirror around the
    vertical axis of an image of the given width), or "offset" (translation
    by dx, dy).
    """

    kind: str
    factor: float = 1.0
    width: float = 0.0
    dx: float = 0.0
    dy: float = 0.0

    def __post_init__(self):
        if self.kind not in ("scale", "hflip", "offset"):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "scale" and self.factor <= 0:
            raise ValueError("scale factor must be positive")

    def label(self) -> str:
        if self.kind == "scale":
            return f"scale({self.factor:g})"
        if self.kind == "hflip":
            return f"hflip(w={self.width:g})"
        return f"offset({self.dx:g},{self.dy:g})"


def scale_transform(factor: float) -> Transform:
    return Transform("scale", factor=factor)


def hflip_transform(width: float) -> Transform:
    return Transform("hflip", width=width)


def offset_transform(dx: float, dy: float) -> Transform:
    return Transform("offset", dx=dx, dy=dy)


def apply_transform(t: Transform, b: Box) -> Box:
    if t.kind == "scale":
        f = t.factor
        return Box(b.x0 * f, b.y0 * f, b.x1 * f, b.y1 * f)
    if t.kind == "hflip":
        return Box(t.width - b.x1, b.y0, t.width - b.x0, b.y1)
    return Box(b.x0 + t.dx, b.y0 + t.dy, b.x1 + t.dx, b.y1 + t.dy)


def inverse_transform(t: Transform, b: Box) -> Box:
    if t.kind == "scale":
        f = t.factor
        return Box(b.x0 / f, b.y0 / f, b.x1 / f, b.y1 / f)
    if t.kind == "hflip":
        return apply_transform(t, b)
    return Box(b.x0 - t.dx, b.y0 - t.dy, b.x1 - t.dx, b.y1 - t.dy)


def nms(dets: list[tuple[Box, float]], iou_threshold: float) -> list[int]:
    """Greedy single-class non-maximum suppression.

    Returns indices of kept detections in descending-score order; a box is
    suppressed when its IoU with an already-kept box exceeds the threshold.
    Score ties break toward the lower original index, so output is
    bit-reproducible.
    """
    if not (0.0 <= iou_threshold <= 1.0):
        raise ValueError("iou_threshold must lie in [0, 1]")
    if not dets:
        return []
    scores = np.array([s for _, s in dets], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite score in NMS input")
    order = np.lexsort((np.arange(len(dets)), -scores))
    ious = iou_matrix([b for b, _ in dets], [b for b, _ in dets])
    suppressed = np.zeros(len(dets), dtype=bool)
    kept: list[int] = []
    for idx in order:
        if suppressed[idx]:
            continue
        kept.append(int(idx))
        suppressed |= ious[idx] > iou_threshold
    return kept
