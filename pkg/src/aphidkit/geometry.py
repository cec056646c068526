"""Axis-aligned box and label-map geometry.

Boxes use integer pixel coordinates with half-open extents: a box
``(min_x, min_y, max_x, max_y)`` covers columns ``min_x .. max_x - 1`` and
rows ``min_y .. max_y - 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from aphidkit import kernels


@dataclass(frozen=True, order=True)
class BBox:
    min_x: int
    min_y: int
    max_x: int
    max_y: int

    def __post_init__(self):
        for name in ("min_x", "min_y", "max_x", "max_y"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise TypeError(f"{name} must be an integer, got {v!r}")
            if v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")
            object.__setattr__(self, name, int(v))
        if self.min_x >= self.max_x or self.min_y >= self.max_y:
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> int:
        return self.max_x - self.min_x

    @property
    def height(self) -> int:
        return self.max_y - self.min_y

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.min_x, self.min_y, self.max_x, self.max_y)

    def contains(self, other: BBox) -> bool:
        return (self.min_x <= other.min_x and self.min_y <= other.min_y
                and other.max_x <= self.max_x and other.max_y <= self.max_y)

    def intersection(self, other: BBox) -> BBox | None:
        x0, y0 = max(self.min_x, other.min_x), max(self.min_y, other.min_y)
        x1, y1 = min(self.max_x, other.max_x), min(self.max_y, other.max_y)
        if x0 >= x1 or y0 >= y1:
            return None
        return BBox(x0, y0, x1, y1)

    def translate(self, dx: int, dy: int) -> BBox:
        return BBox(self.min_x + dx, self.min_y + dy, self.max_x + dx, self.max_y + dy)

    def sort_key(self) -> tuple[int, int, int, int]:
        """Row-major ordering key: (min_y, min_x, max_y, max_x)."""
        return (self.min_y, self.min_x, self.max_y, self.max_x)


def enclosing(boxes: Iterable[BBox]) -> BBox:
    boxes = list(boxes)
    return BBox(min(b.min_x for b in boxes), min(b.min_y for b in boxes),
                max(b.max_x for b in boxes), max(b.max_y for b in boxes))


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.int64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.int64)


def bbox_iou(a: BBox, b: BBox) -> float:
    """Intersection over union from exact integer areas."""
    iw = min(a.max_x, b.max_x) - max(a.min_x, b.min_x)
    ih = min(a.max_y, b.max_y) - max(a.min_y, b.min_y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def bbox_gap(a: BBox, b: BBox) -> float:
    """Euclidean distance between the closest points of two boxes.

    Zero when the boxes overlap or share an edge.
    """
    dx = max(0, b.min_x - a.max_x, a.min_x - b.max_x)
    dy = max(0, b.min_y - a.max_y, a.min_y - b.max_y)
    return math.sqrt(dx * dx + dy * dy)


def merge_groups(boxes: Sequence[BBox], threshold: float) -> list[tuple[BBox, list[int]]]:
    """Merge boxes whose gap is within ``threshold``, iterating to a fixpoint.

    Returns ``(enclosing_box, member_indices)`` pairs sorted by the enclosing
    box's row-major key. Member indices refer to ``boxes``.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    current = list(boxes)
    members = [[i] for i in range(len(current))]
    while current:
        labels = kernels.gap_components(boxes_to_array(current), float(threshold))
        n_groups = int(labels.max()) + 1
        if n_groups == len(current):
            break
        grouped: list[list[int]] = [[] for _ in range(n_groups)]
        for i, lab in enumerate(labels.tolist()):
            grouped[lab].append(i)
        current = [enclosing(current[i] for i in g) for g in grouped]
        members = [sorted(m for i in g for m in members[i]) for g in grouped]
    out = list(zip(current, members))
    out.sort(key=lambda item: (item[0].sort_key(), item[1]))
    return out


def merge_close_boxes(boxes: Sequence[BBox], threshold: float = 10) -> list[BBox]:
    """Replace clusters of nearby boxes by their tight enclosing box.

    The output has no pair of boxes with gap <= ``threshold`` and is sorted
    by (min_y, min_x).
    """
    return [box for box, _ in merge_groups(boxes, threshold)]


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: BBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0 or math.isnan(self.score):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    def rank_key(self):
        # descending score, then lexicographic box
        return (-self.score, self.box.as_tuple())


def rank_detections(dets: Iterable[Detection]) -> list[Detection]:
    return sorted(dets, key=Detection.rank_key)


def nms(dets: Sequence[Detection], iou_threshold: float = 0.6) -> list[Detection]:
    """Greedy non-maximum suppression.

    A detection is dropped when its IoU with an already kept, higher-ranked
    detection exceeds ``iou_threshold``. Returns kept detections in keep order.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in [0, 1]")
    ranked = rank_detections(dets)
    keep = kernels.nms_keep(boxes_to_array([d.box for d in ranked]), float(iou_threshold))
    return [ranked[i] for i in keep.tolist()]


class MissingInstanceError(KeyError):
    """Raised when a label id is absent from an instance mask."""


@dataclass(frozen=True, eq=False)
class InstanceMask:
    """Per-pixel instance labels, indexed ``labels[y, x]``; 0 is background."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise ValueError("label map must be 2-D")
        if not np.issubdtype(arr.dtype, np.integer):
            raise TypeError("label map must hold integers")
        if arr.size and arr.min() < 0:
            raise ValueError("labels must be non-negative")
        ids = np.unique(arr)
        ids = ids[ids != 0]
        if ids.size and (ids[0] != 1 or ids[-1] != ids.size):
            raise ValueError("instance ids must be dense 1..K; use InstanceMask.from_label_map")
        object.__setattr__(self, "labels", arr)

    @classmethod
    def from_label_map(cls, arr) -> InstanceMask:
        """Renumber arbitrary non-negative labels to dense ids, preserving order."""
        arr = np.asarray(arr)
        ids, inverse = np.unique(arr, return_inverse=True)
        offset = 0 if (ids.size and ids[0] == 0) else 1
        return cls((inverse.reshape(arr.shape) + offset).astype(np.int32))

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    @property
    def num_instances(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def areas(self) -> dict[int, int]:
        counts = np.bincount(self.labels.ravel())
        return {i: int(counts[i]) for i in range(1, counts.size) if counts[i]}

    def area(self, instance_id: int) -> int:
        n = int(np.count_nonzero(self.labels == instance_id))
        if instance_id <= 0 or n == 0:
            raise MissingInstanceError(instance_id)
        return n


def mask_to_bbox(mask: InstanceMask, instance_id: int) -> BBox:
    """Tight box around the pixels carrying ``instance_id``."""
    labels = mask.labels if isinstance(mask, InstanceMask) else np.asarray(mask)
    if instance_id <= 0:
        raise MissingInstanceError(instance_id)
    ys, xs = np.nonzero(labels == instance_id)
    if xs.size == 0:
        raise MissingInstanceError(instance_id)
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
