"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on the same random inputs under both backends; outputs are
checked for equality before timings are reported.
"""
import argparse
import timeit

import numpy as np

from aphidkit import _pykernels

try:
    from aphidkit import _ckernels
except ImportError:
    _ckernels = None


def random_boxes(rng, n, extent, max_side):
    xy = rng.integers(0, extent - max_side, size=(n, 2))
    wh = rng.integers(1, max_side, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1).astype(np.int64)


def cases(rng):
    boxes = random_boxes(rng, 400, 2000, 80)
    gts = random_boxes(rng, 300, 2000, 80)
    dets = np.concatenate([gts + rng.integers(-3, 4, size=gts.shape), random_boxes(rng, 100, 2000, 80)])
    dets[:, 2:] = np.maximum(dets[:, 2:], dets[:, :2] + 1)
    dets = np.clip(dets, 0, None)
    cover = random_boxes(rng, 60, 400, 150)
    return {
        "gap_components n=400": lambda k: k.gap_components(boxes, 10.0),
        "iou_matrix 400x300": lambda k: k.iou_matrix(boxes, gts),
        "nms_keep n=400": lambda k: k.nms_keep(dets, 0.6),
        "greedy_match 400x300": lambda k: k.greedy_match(dets, gts, 0.5),
        "union_coverage 60 boxes": lambda k: k.union_coverage(cover, 400, 400),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s}{'python ms':>12s}{'cython ms':>12s}{'speedup':>10s}")
    for name, fn in cases(rng).items():
        a, b = fn(_pykernels), fn(_ckernels)
        if isinstance(a, np.ndarray):
            assert np.array_equal(a, b), name
        else:
            assert a == b, name
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:28s}{t_py:12.2f}{t_c:12.3f}{t_py / t_c:9.0f}x")


if __name__ == "__main__":
    main()
