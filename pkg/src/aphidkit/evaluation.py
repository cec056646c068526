"""Detection scoring: greedy IoU matching, PR curves, AP, recall, coverage."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from aphidkit import kernels
from aphidkit.geometry import BBox, Detection, boxes_to_array, nms

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def _as_box(item) -> BBox:
    return item if isinstance(item, BBox) else item.box


@dataclass
class MatchResult:
    """Indices refer to the input sequences of :func:`match_detections`."""

    matches: list[tuple[int, int]] = field(default_factory=list)
    false_positives: list[int] = field(default_factory=list)
    false_negatives: list[int] = field(default_factory=list)

    @property
    def tp(self) -> int:
        return len(self.matches)

    @property
    def fp(self) -> int:
        return len(self.false_positives)

    @property
    def fn(self) -> int:
        return len(self.false_negatives)


def match_detections(dets: Sequence[Detection], gts: Sequence, iou_thresh: float = 0.5) -> MatchResult:
    """Greedy matching of one patch's detections to its ground truth.

    Detections are visited by descending score (ties by box). Each takes the
    still-unmatched ground truth of highest IoU if that IoU is at least
    ``iou_thresh``; leftovers are false positives and false negatives.
    """
    ids = {d.image_id for d in dets}
    if len(ids) > 1:
        raise ValueError(f"detections from several patches: {sorted(ids)}")
    order = sorted(range(len(dets)), key=lambda i: dets[i].rank_key())
    assigned = kernels.greedy_match(boxes_to_array([dets[i].box for i in order]),
                                    boxes_to_array([_as_box(g) for g in gts]), float(iou_thresh))
    result = MatchResult()
    hit = set()
    for pos, g in enumerate(assigned.tolist()):
        if g >= 0:
            result.matches.append((order[pos], g))
            hit.add(g)
        else:
            result.false_positives.append(order[pos])
    result.false_negatives = [j for j in range(len(gts)) if j not in hit]
    return result


@dataclass
class PRCurve:
    """One point per distinct score cutoff, in order of decreasing cutoff."""

    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray

    def envelope(self) -> np.ndarray:
        """Precision replaced by the best precision at any higher recall."""
        if self.precision.size == 0:
            return self.precision.copy()
        return np.maximum.accumulate(self.precision[::-1])[::-1]


def _group(dets: Iterable[Detection]):
    by_id = defaultdict(list)
    for d in dets:
        by_id[d.image_id].append(d)
    return by_id


def _total_gt(gts: Mapping[str, Sequence]) -> int:
    return sum(len(v) for v in gts.values())


def _tp_flags(dets: Sequence[Detection], gts: Mapping[str, Sequence], iou_thresh: float):
    """Pooled detections in global rank order with their TP flags."""
    pooled, flags = [], []
    for image_id, group in _group(dets).items():
        res = match_detections(group, gts.get(image_id, ()), iou_thresh)
        tp = set(i for i, _ in res.matches)
        for i, d in enumerate(group):
            pooled.append(d)
            flags.append(i in tp)
    order = sorted(range(len(pooled)),
                   key=lambda i: (-pooled[i].score, pooled[i].box.as_tuple(), pooled[i].image_id))
    return [pooled[i] for i in order], np.array([flags[i] for i in order], dtype=bool)


def _curve_and_ap(ranked: Sequence[Detection], flags: np.ndarray, n_gt: int) -> tuple[float, PRCurve]:
    if not ranked:
        empty = np.zeros(0)
        return 0.0, PRCurve(empty, empty.copy(), empty.copy())
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    scores = np.array([d.score for d in ranked])
    # last position of every run of equal scores
    ends = np.nonzero(np.append(scores[1:] != scores[:-1], True))[0]
    tp, fp = tp[ends], fp[ends]
    curve = PRCurve(recall=tp / n_gt, precision=tp / (tp + fp), thresholds=scores[ends])
    ap = 0.0
    prev = 0.0
    for r, p in zip(curve.recall.tolist(), curve.envelope().tolist()):
        ap += (r - prev) * p
        prev = r
    return ap, curve


def average_precision(dets: Sequence[Detection], gts: Mapping[str, Sequence],
                      iou_thresh: float = 0.5) -> tuple[float, PRCurve]:
    """All-points interpolated area under the PR curve.

    ``gts`` maps patch id to its ground-truth boxes (or instances); detections
    on ids missing from ``gts`` count against an empty ground truth.
    """
    n_gt = _total_gt(gts)
    if n_gt == 0:
        raise ValueError("average precision is undefined without ground truth")
    ranked, flags = _tp_flags(dets, gts, iou_thresh)
    return _curve_and_ap(ranked, flags, n_gt)


def recall_overall(dets: Sequence[Detection], gts: Mapping[str, Sequence], iou_thresh: float = 0.5) -> float:
    """TP / (TP + FN) using every detection."""
    n_gt = _total_gt(gts)
    if n_gt == 0:
        raise ValueError("recall is undefined without ground truth")
    _, flags = _tp_flags(dets, gts, iou_thresh)
    return int(flags.sum()) / n_gt


@dataclass
class ThresholdResult:
    iou: float
    ap: float
    recall: float
    tp: int
    fp: int
    fn: int
    curve: PRCurve | None = None

    def row(self) -> dict:
        return {"iou": self.iou, "ap": self.ap, "recall": self.recall,
                "tp": self.tp, "fp": self.fp, "fn": self.fn}


@dataclass
class EvalReport:
    results: list[ThresholdResult]
    infestation: dict[str, float] = field(default_factory=dict)
    nms_threshold: float | None = None
    coco_map: float | None = None

    def result(self, iou: float) -> ThresholdResult:
        for r in self.results:
            if math.isclose(r.iou, iou):
                return r
        raise KeyError(iou)

    def to_dict(self, curves: bool = False) -> dict:
        rows = []
        for r in self.results:
            row = r.row()
            if curves and r.curve is not None:
                row["curve"] = {"recall": r.curve.recall.tolist(), "precision": r.curve.precision.tolist(),
                                "thresholds": r.curve.thresholds.tolist()}
            rows.append(row)
        out = {"config": {"iou_thresholds": [r.iou for r in self.results], "nms": self.nms_threshold},
               "results": rows, "infestation": dict(sorted(self.infestation.items()))}
        if self.coco_map is not None:
            out["coco_map"] = self.coco_map
        return out


def apply_nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    grouped = _group(dets)
    out = []
    for image_id in sorted(grouped):
        out.extend(nms(grouped[image_id], iou_threshold))
    return out


def evaluate_sweep(dets: Sequence[Detection], gts: Mapping[str, Sequence],
                   thresholds: Sequence[float] = (0.5,), coco: bool = False,
                   nms_threshold: float | None = None, patch_size: int | None = None,
                   score_cutoff: float = 0.3) -> EvalReport:
    """AP, recall and TP/FP/FN at every IoU threshold.

    ``coco`` adds the mean AP over 0.50:0.05:0.95. ``nms_threshold`` runs NMS
    per patch first. With ``patch_size`` a per-patch infestation score is
    included for every ground-truth patch.
    """
    if not thresholds:
        raise ValueError("need at least one IoU threshold")
    for t in thresholds:
        if not 0.0 < t <= 1.0:
            raise ValueError(f"IoU threshold {t} outside (0, 1]")
    if nms_threshold is not None:
        dets = apply_nms(dets, nms_threshold)
    n_gt = _total_gt(gts)
    if n_gt == 0:
        raise ValueError("average precision is undefined without ground truth")
    results = []
    for t in thresholds:
        ranked, flags = _tp_flags(dets, gts, t)
        ap, curve = _curve_and_ap(ranked, flags, n_gt)
        tp = int(flags.sum())
        results.append(ThresholdResult(float(t), ap, tp / n_gt, tp, len(dets) - tp, n_gt - tp, curve))
    coco_map = None
    if coco:
        coco_map = float(np.mean([average_precision(dets, gts, t)[0] for t in COCO_THRESHOLDS]))
    infestation = {}
    if patch_size is not None:
        grouped = _group(dets)
        infestation = {pid: infestation_score(grouped.get(pid, []), patch_size, score_cutoff) for pid in gts}
    return EvalReport(results, infestation, nms_threshold, coco_map)


def infestation_score(patch_dets: Sequence[Detection], patch_size: int, score_cutoff: float = 0.3) -> float:
    """Fraction of the patch covered by the union of confident boxes."""
    if not 0.0 <= score_cutoff <= 1.0:
        raise ValueError("score_cutoff must lie in [0, 1]")
    boxes = [d.box for d in patch_dets if d.score >= score_cutoff]
    if not boxes:
        return 0.0
    covered = kernels.union_coverage(boxes_to_array(boxes), int(patch_size), int(patch_size))
    return covered / (patch_size * patch_size)


# ---------------------------------------------------------------------------
# files

class PredictionFormatError(ValueError):
    pass


def parse_prediction(line: str, lineno: int = 0) -> Detection:
    try:
        rec = json.loads(line)
        x0, y0, x1, y1 = (int(round(float(v))) for v in rec["bbox"])
        return Detection(str(rec["id"]), BBox(max(x0, 0), max(y0, 0), x1, y1), float(rec["score"]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise PredictionFormatError(f"line {lineno}: {exc}") from None


def read_predictions(path) -> list[Detection]:
    dets = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                dets.append(parse_prediction(line, lineno))
    return dets


def format_prediction(det: Detection) -> str:
    return json.dumps({"id": det.image_id, "bbox": list(det.box.as_tuple()), "score": det.score})


def write_predictions(dets: Iterable[Detection], path) -> None:
    with open(path, "w") as fh:
        for d in dets:
            fh.write(format_prediction(d) + "\n")


def write_report(report: EvalReport, out_dir, stem: str = "report") -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(json.dumps(report.to_dict(curves=True), indent=2) + "\n")
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "AP", "recall", "TP", "FP", "FN"])
        for r in report.results:
            writer.writerow([f"{r.iou:.2f}", f"{r.ap:.6f}", f"{r.recall:.6f}", r.tp, r.fp, r.fn])
    return {"json": json_path, "csv": csv_path}


def plot_pr_curves(report: EvalReport, out_dir, stem: str = "pr") -> list[Path]:
    """One SVG per IoU threshold. Needs matplotlib."""
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    paths = []
    for r in report.results:
        fig, ax = plt.subplots(figsize=(4, 4))
        if r.curve is not None and r.curve.recall.size:
            ax.step(np.r_[0.0, r.curve.recall], np.r_[1.0, r.curve.envelope()], where="pre", label="envelope")
            ax.plot(r.curve.recall, r.curve.precision, ".", ms=3, label="raw")
        ax.set(xlim=(0, 1), ylim=(0, 1.02), xlabel="recall", ylabel="precision",
               title=f"IoU {r.iou:.2f}  AP {r.ap:.3f}")
        ax.legend(loc="lower left")
        path = Path(out_dir) / f"{stem}_iou{r.iou:.2f}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std())
