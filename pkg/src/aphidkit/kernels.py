"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the pure-Python
module is used. Set ``APHIDKIT_PURE_PYTHON=1`` to force the fallback.
"""
import os

from aphidkit import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("APHIDKIT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from aphidkit import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        pass

gap_components = _impl.gap_components
iou_matrix = _impl.iou_matrix
nms_keep = _impl.nms_keep
greedy_match = _impl.greedy_match
union_coverage = _impl.union_coverage

__all__ = [
    "BACKEND",
    "gap_components",
    "iou_matrix",
    "nms_keep",
    "greedy_match",
    "union_coverage",
]
