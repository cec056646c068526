# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``; identical contracts."""
import numpy as np

from libc.stdlib cimport malloc, free


ctypedef long long i64


cdef inline i64 _find(i64* parent, i64 i) noexcept nogil:
    cdef i64 root = i
    cdef i64 nxt
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


cdef inline double _iou(i64 ax0, i64 ay0, i64 ax1, i64 ay1,
                        i64 bx0, i64 by0, i64 bx1, i64 by1) noexcept nogil:
    cdef i64 iw = (ax1 if ax1 < bx1 else bx1) - (ax0 if ax0 > bx0 else bx0)
    cdef i64 ih = (ay1 if ay1 < by1 else by1) - (ay0 if ay0 > by0 else by0)
    cdef i64 inter, union
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return <double>inter / <double>union


def _as_boxes(boxes):
    return np.ascontiguousarray(np.asarray(boxes, dtype=np.int64).reshape(-1, 4))


def gap_components(boxes, double threshold):
    cdef i64[:, ::1] b = _as_boxes(boxes)
    cdef Py_ssize_t n = b.shape[0]
    cdef i64[::1] order = np.argsort(np.asarray(b[:, 0]), kind="stable").astype(np.int64)
    cdef i64* parent = <i64*>malloc((n + 1) * sizeof(i64))
    cdef Py_ssize_t a, c, i, j
    cdef i64 dx, dy, ri, rj, t
    cdef double thr2 = threshold * threshold
    labels = np.empty(n, dtype=np.int64)
    cdef i64[::1] lab = labels
    if parent == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                parent[i] = i
            for a in range(n):
                i = order[a]
                for c in range(a + 1, n):
                    j = order[c]
                    dx = b[j, 0] - b[i, 2]
                    if dx > 0 and <double>(dx * dx) > thr2:
                        break
                    t = b[i, 0] - b[j, 2]
                    if t > dx:
                        dx = t
                    if dx < 0:
                        dx = 0
                    dy = b[j, 1] - b[i, 3]
                    t = b[i, 1] - b[j, 3]
                    if t > dy:
                        dy = t
                    if dy < 0:
                        dy = 0
                    if <double>(dx * dx + dy * dy) <= thr2:
                        ri = _find(parent, i)
                        rj = _find(parent, j)
                        if ri < rj:
                            parent[rj] = ri
                        elif rj < ri:
                            parent[ri] = rj
        # roots are the smallest member index, so first-appearance order is
        # the order in which roots are met while scanning i ascending
        seen = {}
        for i in range(n):
            ri = _find(parent, i)
            if ri not in seen:
                seen[ri] = len(seen)
            lab[i] = seen[ri]
    finally:
        free(parent)
    return labels


def iou_matrix(a, b):
    cdef i64[:, ::1] ba = _as_boxes(a)
    cdef i64[:, ::1] bb = _as_boxes(b)
    out = np.zeros((ba.shape[0], bb.shape[0]), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(ba.shape[0]):
            for j in range(bb.shape[0]):
                o[i, j] = _iou(ba[i, 0], ba[i, 1], ba[i, 2], ba[i, 3],
                               bb[j, 0], bb[j, 1], bb[j, 2], bb[j, 3])
    return out


def nms_keep(boxes, double iou_threshold):
    cdef i64[:, ::1] b = _as_boxes(boxes)
    cdef Py_ssize_t n = b.shape[0]
    sup_arr = np.zeros(n, dtype=np.uint8)
    keep_arr = np.empty(n, dtype=np.int64)
    cdef unsigned char[::1] sup = sup_arr
    cdef i64[::1] keep = keep_arr
    cdef Py_ssize_t i, j, nk = 0
    with nogil:
        for i in range(n):
            if sup[i]:
                continue
            keep[nk] = i
            nk += 1
            for j in range(i + 1, n):
                if not sup[j] and _iou(b[i, 0], b[i, 1], b[i, 2], b[i, 3],
                                       b[j, 0], b[j, 1], b[j, 2], b[j, 3]) > iou_threshold:
                    sup[j] = 1
    return keep_arr[:nk].copy()


def greedy_match(dets, gts, double iou_threshold):
    cdef i64[:, ::1] d = _as_boxes(dets)
    cdef i64[:, ::1] g = _as_boxes(gts)
    cdef Py_ssize_t nd = d.shape[0], ng = g.shape[0]
    taken_arr = np.zeros(ng, dtype=np.uint8)
    out = np.full(nd, -1, dtype=np.int64)
    cdef unsigned char[::1] taken = taken_arr
    cdef i64[::1] o = out
    cdef Py_ssize_t i, j, best
    cdef double v, best_iou
    with nogil:
        for i in range(nd):
            best = -1
            best_iou = -1.0
            for j in range(ng):
                if taken[j]:
                    continue
                v = _iou(d[i, 0], d[i, 1], d[i, 2], d[i, 3],
                         g[j, 0], g[j, 1], g[j, 2], g[j, 3])
                if v >= iou_threshold and v > best_iou:
                    best = j
                    best_iou = v
            if best >= 0:
                taken[best] = 1
                o[i] = best
    return out


def union_coverage(boxes, Py_ssize_t width, Py_ssize_t height):
    # coordinate compression: mark cells of the grid spanned by the box edges
    arr = np.asarray(boxes, dtype=np.int64).reshape(-1, 4)
    arr = np.stack([np.clip(arr[:, 0], 0, width), np.clip(arr[:, 1], 0, height),
                    np.clip(arr[:, 2], 0, width), np.clip(arr[:, 3], 0, height)], axis=1)
    arr = arr[(arr[:, 0] < arr[:, 2]) & (arr[:, 1] < arr[:, 3])]
    if arr.shape[0] == 0:
        return 0
    xs_arr = np.unique(np.concatenate([arr[:, 0], arr[:, 2]]))
    ys_arr = np.unique(np.concatenate([arr[:, 1], arr[:, 3]]))
    cdef i64[:, ::1] idx = np.ascontiguousarray(np.stack(
        [np.searchsorted(xs_arr, arr[:, 0]), np.searchsorted(ys_arr, arr[:, 1]),
         np.searchsorted(xs_arr, arr[:, 2]), np.searchsorted(ys_arr, arr[:, 3])], axis=1).astype(np.int64))
    cdef i64[::1] xs = xs_arr
    cdef i64[::1] ys = ys_arr
    cells_arr = np.zeros((ys_arr.size, xs_arr.size), dtype=np.uint8)
    cdef unsigned char[:, ::1] cells = cells_arr
    cdef Py_ssize_t k, i, j
    cdef i64 total = 0
    with nogil:
        for k in range(idx.shape[0]):
            for j in range(idx[k, 1], idx[k, 3]):
                for i in range(idx[k, 0], idx[k, 2]):
                    cells[j, i] = 1
        for j in range(ys.shape[0] - 1):
            for i in range(xs.shape[0] - 1):
                if cells[j, i]:
                    total += (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j])
    return int(total)
