import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aphidkit.evaluation import (COCO_THRESHOLDS, PredictionFormatError, apply_nms, average_precision,
                                 evaluate_sweep, infestation_score, match_detections, mean_std,
                                 parse_prediction, read_predictions, recall_overall, write_predictions,
                                 write_report)
from aphidkit.geometry import BBox, Detection, bbox_iou
from oracles import exhaustive_ap, raster_iou_counts


def d(box, score, pid="p"):
    return Detection(pid, BBox(*box), score)


G = BBox(0, 0, 10, 10)


class TestMatch:
    def test_exact(self):
        r = match_detections([d((0, 0, 10, 10), 0.9)], [G])
        assert (r.tp, r.fp, r.fn) == (1, 0, 0)

    def test_duplicate(self):
        r = match_detections([d((0, 0, 10, 10), 0.9), d((0, 0, 10, 10), 0.8)], [G])
        assert (r.tp, r.fp, r.fn) == (1, 1, 0)
        assert r.matches == [(0, 0)] and r.false_positives == [1]

    def test_low_iou(self):
        inter, union = raster_iou_counts((0, 0, 10, 10), (5, 5, 15, 15))
        assert inter / union == pytest.approx(0.1428, abs=1e-4)
        r = match_detections([d((5, 5, 15, 15), 0.9)], [G], 0.25)
        assert (r.tp, r.fp, r.fn) == (0, 1, 1)

    def test_threshold_inclusive(self):
        assert bbox_iou(BBox(0, 0, 20, 10), BBox(0, 0, 10, 10)) == 0.5
        assert match_detections([d((0, 0, 20, 10), 0.9)], [G], 0.5).tp == 1

    def test_takes_highest_iou(self):
        gts = [BBox(0, 0, 10, 10), BBox(2, 0, 12, 10)]
        r = match_detections([d((2, 0, 12, 10), 0.9)], gts, 0.3)
        assert r.matches == [(0, 1)]

    def test_mixed_ids(self):
        with pytest.raises(ValueError):
            match_detections([d((0, 0, 1, 1), 0.5, "a"), d((0, 0, 1, 1), 0.5, "b")], [])

    def test_accepts_instances(self):
        from aphidkit.annotation import ClusterInstance
        assert match_detections([d((0, 0, 10, 10), 0.9)], [ClusterInstance(1, G)]).tp == 1


class TestAP:
    def test_perfect(self):
        ap, _ = average_precision([d((0, 0, 10, 10), 0.9)], {"p": [G]})
        assert ap == 1.0

    def test_no_detections(self):
        ap, curve = average_precision([], {"p": [G]})
        assert ap == 0.0 and curve.recall.size == 0

    def test_hand_computed(self):
        gts = {"p": [BBox(0, 0, 10, 10), BBox(50, 50, 60, 60)]}
        dets = [d((0, 0, 10, 10), 0.9), d((100, 100, 110, 110), 0.8), d((50, 50, 60, 60), 0.7)]
        ap, curve = average_precision(dets, gts)
        assert ap == pytest.approx(1 * 0.5 + (2 / 3) * 0.5)
        assert ap == pytest.approx(0.8333, abs=1e-4)
        assert ap == exhaustive_ap([(x.image_id, x.box.as_tuple(), x.score) for x in dets],
                                   {"p": [g.as_tuple() for g in gts["p"]]}, 0.5)
        assert curve.recall.tolist() == [0.5, 0.5, 1.0]

    def test_zero_gt(self):
        with pytest.raises(ValueError):
            average_precision([d((0, 0, 1, 1), 0.5)], {"p": []})
        with pytest.raises(ValueError):
            recall_overall([], {})

    def test_detection_on_unknown_patch_is_fp(self):
        ap, _ = average_precision([d((0, 0, 10, 10), 0.9, "q"), d((0, 0, 10, 10), 0.5)], {"p": [G]})
        assert ap == 0.5

    def test_tied_scores_single_point(self):
        dets = [d((0, 0, 10, 10), 0.5), d((30, 30, 40, 40), 0.5)]
        ap, curve = average_precision(dets, {"p": [G]})
        assert curve.recall.tolist() == [1.0] and curve.precision.tolist() == [0.5]
        assert ap == 0.5


class TestRecall:
    def test_all(self):
        assert recall_overall([d((0, 0, 10, 10), 0.1)], {"p": [G]}) == 1.0

    def test_half(self):
        assert recall_overall([d((0, 0, 10, 10), 0.1)], {"p": [G, BBox(50, 50, 60, 60)]}) == 0.5


# random small instances on a coarse grid so that overlaps are common
@st.composite
def small_box(draw):
    x0 = draw(st.integers(0, 8))
    y0 = draw(st.integers(0, 8))
    return (x0, y0, x0 + draw(st.integers(1, 6)), y0 + draw(st.integers(1, 6)))


@st.composite
def instance(draw):
    pids = ["a", "b"]
    gts = {p: draw(st.lists(small_box(), max_size=3)) for p in pids}
    if not any(gts.values()):
        gts["a"].append(draw(small_box()))
    dets = draw(st.lists(st.tuples(st.sampled_from(pids), small_box(),
                                   st.integers(1, 20).map(lambda k: k / 20)), max_size=10))
    return dets, gts


def to_lib(dets, gts):
    return ([Detection(p, BBox(*b), s) for p, b, s in dets],
            {p: [BBox(*b) for b in v] for p, v in gts.items()})


class TestAPProperties:
    @given(instance(), st.sampled_from([0.1, 0.25, 0.5, 0.75]))
    def test_exhaustive_oracle(self, inst, thr):
        dets, gts = inst
        ap, _ = average_precision(*to_lib(dets, gts), thr)
        assert ap == exhaustive_ap(dets, gts, thr)

    @given(instance(), st.sampled_from([0.25, 0.5]))
    def test_curve_shape(self, inst, thr):
        ap, curve = average_precision(*to_lib(dets := inst[0], inst[1]), thr)
        assert 0.0 <= ap <= 1.0
        assert np.all(np.diff(curve.recall) >= 0)
        env = curve.envelope()
        assert np.all(np.diff(env) <= 0)
        assert np.all((curve.precision >= 0) & (curve.precision <= 1))
        if dets:
            assert curve.recall[-1] == recall_overall(*to_lib(*inst), thr)

    @given(instance(), st.data())
    def test_duplicate_never_helps(self, inst, data):
        # a duplicate copies a matched detection's box at no higher score and
        # has no other ground truth within reach, so it can only be a FP
        dets, gts = inst
        lib_d, lib_g = to_lib(dets, gts)
        base, _ = average_precision(lib_d, lib_g, 0.5)
        candidates = []
        for pid in lib_g:
            group = [x for x in lib_d if x.image_id == pid]
            for i, j in match_detections(group, lib_g[pid], 0.5).matches:
                others = [g for k, g in enumerate(lib_g[pid]) if k != j]
                if all(bbox_iou(group[i].box, g) < 0.5 for g in others):
                    candidates.append(group[i])
        if not candidates:
            return
        src = data.draw(st.sampled_from(candidates))
        score = data.draw(st.integers(1, 20).map(lambda k: k / 20).filter(lambda s: s <= src.score))
        dup = Detection(src.image_id, src.box, score)
        assert average_precision(lib_d + [dup], lib_g, 0.5)[0] <= base

    @given(instance(), st.integers(10, 100))
    def test_score_scaling(self, inst, pct):
        dets, gts = inst
        lib_d, lib_g = to_lib(dets, gts)
        scaled = [Detection(x.image_id, x.box, x.score * pct / 100) for x in lib_d]
        assert average_precision(scaled, lib_g, 0.5)[0] == average_precision(lib_d, lib_g, 0.5)[0]
        for pid in lib_g:
            a = match_detections([x for x in lib_d if x.image_id == pid], lib_g[pid])
            b = match_detections([x for x in scaled if x.image_id == pid], lib_g[pid])
            assert a.matches == b.matches

    @given(instance())
    def test_threshold_monotone(self, inst):
        lib_d, lib_g = to_lib(*inst)
        aps = [average_precision(lib_d, lib_g, t)[0] for t in (0.1, 0.25, 0.5, 0.75, 0.9)]
        recs = [recall_overall(lib_d, lib_g, t) for t in (0.1, 0.25, 0.5, 0.75, 0.9)]
        assert all(x >= y for x, y in zip(aps, aps[1:]))
        assert all(x >= y for x, y in zip(recs, recs[1:]))


class TestSweep:
    def test_single_entry(self):
        rep = evaluate_sweep([d((0, 0, 10, 10), 0.9)], {"p": [G]}, [0.5])
        assert len(rep.results) == 1
        r = rep.result(0.5)
        assert (r.ap, r.recall, r.tp, r.fp, r.fn) == (1.0, 1.0, 1, 0, 0)

    def test_perfect_everywhere(self):
        gts = {"p": [G, BBox(20, 20, 40, 40)], "q": [BBox(5, 5, 9, 9)]}
        dets = [Detection(p, b, 0.9) for p, v in gts.items() for b in v]
        rep = evaluate_sweep(dets, gts, list(COCO_THRESHOLDS) + [1.0], coco=True)
        assert all(r.ap == 1.0 for r in rep.results)
        assert rep.coco_map == 1.0

    def test_matches_single_threshold_ap(self):
        gts = {"p": [G, BBox(50, 50, 60, 60)]}
        dets = [d((1, 0, 11, 10), 0.9), d((100, 100, 110, 110), 0.8), d((50, 52, 60, 62), 0.7)]
        rep = evaluate_sweep(dets, gts, [0.25, 0.5, 0.75])
        for r in rep.results:
            assert r.ap == average_precision(dets, gts, r.iou)[0]
            assert r.tp + r.fn == 2 and r.recall == r.tp / 2

    def test_jitter_ordering(self):
        rng = np.random.default_rng(0)
        gts, dets = {}, []
        for k in range(20):
            pid = f"p{k}"
            gts[pid] = []
            for j in range(6):
                x, y = 60 * j + 5, int(rng.integers(0, 340))
                w, h = int(rng.integers(15, 50)), int(rng.integers(15, 50))
                gts[pid].append(BBox(x, y, x + w, y + h))
                jit = np.rint(rng.normal(0, 2, 4)).astype(int)
                b = (max(0, x + jit[0]), max(0, y + jit[1]), x + w + jit[2], y + h + jit[3])
                dets.append(Detection(pid, BBox(*b), float(rng.uniform(0.3, 1))))
        rep = evaluate_sweep(dets, gts, [0.25, 0.5, 0.75])
        a25, a50, a75 = (rep.result(t).ap for t in (0.25, 0.5, 0.75))
        assert a25 >= a50 >= a75
        assert 0 < a75 < a50

    def test_bad_thresholds(self):
        for bad in ([], [0.0], [1.2]):
            with pytest.raises(ValueError):
                evaluate_sweep([], {"p": [G]}, bad)

    def test_nms_option(self):
        dets = [d((0, 0, 10, 10), 0.9), d((0, 0, 10, 11), 0.8)]
        rep = evaluate_sweep(dets, {"p": [G]}, [0.5], nms_threshold=0.6)
        assert rep.result(0.5).fp == 0 and rep.nms_threshold == 0.6
        assert len(apply_nms(dets, 0.6)) == 1

    def test_infestation_included(self):
        rep = evaluate_sweep([d((0, 0, 200, 200), 0.9)], {"p": [G], "q": [G]}, [0.5], patch_size=400)
        assert rep.infestation == {"p": 0.25, "q": 0.0}


class TestInfestation:
    def test_empty(self):
        assert infestation_score([], 400) == 0.0

    def test_quarter(self):
        assert infestation_score([d((0, 0, 200, 200), 0.9)], 400) == 0.25

    def test_overlap_union(self):
        a, b = (0, 0, 200, 200), (100, 100, 300, 300)
        canvas = np.zeros((400, 400), dtype=bool)
        for x0, y0, x1, y1 in (a, b):
            canvas[y0:y1, x0:x1] = True
        assert canvas.sum() == 70000
        assert infestation_score([d(a, 0.9), d(b, 0.9)], 400) == 70000 / 160000 == 0.4375

    def test_cutoff(self):
        assert infestation_score([d((0, 0, 200, 200), 0.2)], 400, 0.3) == 0.0
        with pytest.raises(ValueError):
            infestation_score([], 400, 1.5)

    @pytest.mark.usefixtures("force_backend")
    @given(st.lists(st.tuples(st.integers(0, 39), st.integers(0, 39), st.integers(1, 30), st.integers(1, 30)),
                    max_size=8))
    def test_raster_oracle(self, raw):
        canvas = np.zeros((40, 40), dtype=bool)
        dets = []
        for x, y, w, h in raw:
            canvas[y:y + h, x:x + w] = True
            dets.append(d((x, y, x + w, y + h), 0.9))
        assert infestation_score(dets, 40) == canvas.sum() / 1600


class TestFiles:
    def test_prediction_round_trip(self, tmp_path):
        dets = [d((0, 0, 10, 10), 0.9, "img_x0_y0"), d((5, 6, 7, 8), 0.125, "img_x200_y0")]
        path = tmp_path / "pred.jsonl"
        write_predictions(dets, path)
        assert read_predictions(path) == dets

    def test_parse_rounds_floats(self):
        det = parse_prediction('{"id": "a", "bbox": [0.4, 1.6, 10.5, 12.2], "score": 0.5}')
        assert det.box == BBox(0, 2, 10, 12)

    @pytest.mark.parametrize("line", ['{"id": "a", "bbox": [0, 0, 1], "score": 0.5}',
                                      '{"id": "a", "bbox": [5, 0, 1, 1], "score": 0.5}',
                                      '{"id": "a", "bbox": [0, 0, 1, 1], "score": 2}',
                                      '{"bbox": [0, 0, 1, 1], "score": 0.5}', "not json"])
    def test_bad_lines(self, line):
        with pytest.raises(PredictionFormatError):
            parse_prediction(line, 3)

    def test_report_files(self, tmp_path):
        rep = evaluate_sweep([d((0, 0, 10, 10), 0.9)], {"p": [G, BBox(30, 30, 40, 40)]}, [0.5, 0.75])
        paths = write_report(rep, tmp_path)
        rows = list(csv.reader(open(paths["csv"])))
        assert rows[0] == ["threshold", "AP", "recall", "TP", "FP", "FN"]
        assert rows[1] == ["0.50", "0.500000", "0.500000", "1", "0", "1"]
        doc = json.loads(paths["json"].read_text())
        assert doc["config"]["iou_thresholds"] == [0.5, 0.75]
        assert doc["results"][0]["curve"]["recall"] == [0.5]

    def test_mean_std(self):
        assert mean_std([1.0, 3.0]) == (2.0, 1.0)
