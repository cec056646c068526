"""Aphid-cluster dataset engineering and detection evaluation."""
from aphidkit.geometry import (BBox, Detection, InstanceMask, bbox_gap, bbox_iou, mask_to_bbox,
                               merge_close_boxes, nms)
from aphidkit.kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BBox",
    "Detection",
    "InstanceMask",
    "bbox_gap",
    "bbox_iou",
    "mask_to_bbox",
    "merge_close_boxes",
    "nms",
]
