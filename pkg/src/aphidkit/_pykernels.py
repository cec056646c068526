"""Pure-Python reference implementations of the hot kernels.

Every function here mirrors one in ``_ckernels.pyx`` exactly (same inputs,
same outputs, same tie-breaking). Boxes are ``(N, 4)`` int64 arrays of
half-open ``(min_x, min_y, max_x, max_y)`` pixel coordinates.
"""
import numpy as np


def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        parent[i], i = root, parent[i]
    return root


def gap_components(boxes, threshold):
    """Label connected components of the "gap <= threshold" graph.

    Labels are dense and numbered in order of first appearance.
    """
    rows = np.asarray(boxes, dtype=np.int64).reshape(-1, 4).tolist()
    n = len(rows)
    parent = list(range(n))
    thr2 = float(threshold) * float(threshold)
    order = sorted(range(n), key=lambda i: rows[i][0])
    for a in range(n):
        i = order[a]
        ax0, ay0, ax1, ay1 = rows[i]
        for b in range(a + 1, n):
            j = order[b]
            bx0, by0, bx1, by1 = rows[j]
            dx = bx0 - ax1
            # min_x sorted ascending: the x gap only grows from here
            if dx > 0 and float(dx * dx) > thr2:
                break
            dx = max(0, dx, ax0 - bx1)
            dy = max(0, by0 - ay1, ay0 - by1)
            if float(dx * dx + dy * dy) <= thr2:
                ri, rj = _find(parent, i), _find(parent, j)
                if ri != rj:
                    if ri < rj:
                        parent[rj] = ri
                    else:
                        parent[ri] = rj
    labels = np.empty(n, dtype=np.int64)
    seen = {}
    for i in range(n):
        r = _find(parent, i)
        if r not in seen:
            seen[r] = len(seen)
        labels[i] = seen[r]
    return labels


def _iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def iou_matrix(a, b):
    ra = np.asarray(a, dtype=np.int64).reshape(-1, 4).tolist()
    rb = np.asarray(b, dtype=np.int64).reshape(-1, 4).tolist()
    out = np.zeros((len(ra), len(rb)), dtype=np.float64)
    for i, x in enumerate(ra):
        for j, y in enumerate(rb):
            out[i, j] = _iou(x, y)
    return out


def nms_keep(boxes, iou_threshold):
    """Greedy suppression over boxes already sorted into processing order."""
    rows = np.asarray(boxes, dtype=np.int64).reshape(-1, 4).tolist()
    suppressed = [False] * len(rows)
    keep = []
    for i, box in enumerate(rows):
        if suppressed[i]:
            continue
        keep.append(i)
        for j in range(i + 1, len(rows)):
            if not suppressed[j] and _iou(box, rows[j]) > iou_threshold:
                suppressed[j] = True
    return np.asarray(keep, dtype=np.int64)


def greedy_match(dets, gts, iou_threshold):
    """Match detections (in processing order) to ground truths.

    Returns, per detection, the matched ground-truth index or -1. Each
    detection takes the unmatched ground truth of highest IoU (lowest index
    on ties) when that IoU reaches the threshold.
    """
    drows = np.asarray(dets, dtype=np.int64).reshape(-1, 4).tolist()
    grows = np.asarray(gts, dtype=np.int64).reshape(-1, 4).tolist()
    taken = [False] * len(grows)
    out = np.full(len(drows), -1, dtype=np.int64)
    for i, d in enumerate(drows):
        best, best_iou = -1, -1.0
        for j, g in enumerate(grows):
            if taken[j]:
                continue
            v = _iou(d, g)
            if v >= iou_threshold and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
            out[i] = best
    return out


def union_coverage(boxes, width, height):
    """Count pixels of a ``width x height`` canvas covered by any box."""
    canvas = np.zeros((height, width), dtype=bool)
    for x0, y0, x1, y1 in np.asarray(boxes, dtype=np.int64).reshape(-1, 4).tolist():
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, width), min(y1, height)
        if x0 < x1 and y0 < y1:
            canvas[y0:y1, x0:x1] = True
    return int(canvas.sum())
