"""Command-line entry point: ``aphidkit <subcommand> ...``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from aphidkit.annotation import (VIEWS, DatasetManifest, ManifestRecord, dataset_stats,
                                 load_manifest, load_record, save_label_map, save_manifest, write_voc_xml)
from aphidkit.evaluation import (COCO_THRESHOLDS, evaluate_sweep, mean_std, plot_pr_curves, read_predictions,
                                 write_predictions, write_report)
from aphidkit.patches import (PipelineConfig, StageCounts, crop_pixels, patch_from_xml, patch_to_xml,
                              run_pipeline)
from aphidkit.splits import FoldAssignment, assign_folds, check_stratified, fold_view_counts

log = logging.getLogger("aphidkit")


class CommandError(Exception):
    """Reported as ``error: <message>`` with exit status 1."""


# ---------------------------------------------------------------------------
# helpers

def _ratio_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not values or any(not 0.0 < v <= 1.0 for v in values):
        raise argparse.ArgumentTypeError(f"IoU thresholds must lie in (0, 1]: {text!r}")
    return values


def _int_range(text: str) -> tuple[int, int]:
    parts = text.split(",")
    try:
        lo, hi = (int(parts[0]), int(parts[-1]))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or MIN,MAX: {text!r}") from None
    if len(parts) > 2 or lo < 0 or hi < lo:
        raise argparse.ArgumentTypeError(f"expected N or MIN,MAX with 0 <= MIN <= MAX: {text!r}")
    return lo, hi


class _Staging:
    """Build an output directory next to its destination and move it into place on success."""

    def __init__(self, out: Path):
        self.out = out

    def __enter__(self) -> Path:
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.", dir=self.out.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.out.exists():
            shutil.rmtree(self.out)
        self.tmp.rename(self.out)
        return False


def _pipeline_config(args) -> PipelineConfig:
    base = PipelineConfig.from_json(Path(args.config).read_text()) if args.config else PipelineConfig()
    updates = {k: v for k, v in (("patch", args.patch), ("stride", args.stride),
                                 ("merge_px", args.merge_px), ("min_fraction", args.min_fraction))
               if v is not None}
    if args.no_merge:
        updates["merge"] = False
    if args.no_remove_tiny:
        updates["remove_tiny"] = False
    return replace(base, **updates)


# ---------------------------------------------------------------------------
# patchify

def _patchify_one(record: ManifestRecord, config: PipelineConfig, out: Path, crops: bool):
    image, comp_map = load_record(record)
    result = run_pipeline(image, config, comp_map)
    pixels = None
    if crops and record.image is not None:
        from PIL import Image
        with Image.open(record.image) as im:
            pixels = np.asarray(im.convert("RGB"))
        if pixels.shape[:2] != (record.height, record.width):
            raise CommandError(f"{record.image}: size {pixels.shape[1]}x{pixels.shape[0]} does not match "
                               f"manifest {record.width}x{record.height}")
    entries = []
    for p in result.patches:
        ann = Path("annotations") / f"{p.patch_id}.xml"
        (out / ann).write_text(patch_to_xml(p))
        entry = {"id": p.patch_id, "source": p.source_id, "view": p.view, "x": p.x_offset,
                 "y": p.y_offset, "size": p.size, "annotation": ann.as_posix()}
        if pixels is not None:
            from PIL import Image
            img = Path("images") / f"{p.patch_id}.png"
            Image.fromarray(np.ascontiguousarray(crop_pixels(pixels, p))).save(out / img)
            entry["image"] = img.as_posix()
        entries.append(entry)
    return entries, result.counts


def cmd_patchify(args) -> int:
    config = _pipeline_config(args)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    counts = StageCounts()
    entries = []
    with _Staging(out) as tmp:
        (tmp / "annotations").mkdir()
        crops = not args.annotations_only
        if crops:
            (tmp / "images").mkdir()
        jobs = max(1, args.jobs)
        if jobs > 1 and len(manifest) > 1:
            with ProcessPoolExecutor(jobs) as pool:
                futures = [pool.submit(_patchify_one, r, config, tmp, crops) for r in manifest]
                results = [f.result() for f in futures]
        else:
            results = [_patchify_one(r, config, tmp, crops) for r in manifest]
        for e, c in results:
            entries.extend(e)
            counts += c
        doc = {"config": asdict(config), "counts": asdict(counts), "patches": entries}
        (tmp / "patches.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(f"config              patch={config.patch} stride={config.stride} "
          f"merge={'%g px' % config.merge_px if config.merge else 'off'} "
          f"remove_tiny={'<%g' % config.min_fraction if config.remove_tiny else 'off'}")
    print(f"images              {len(manifest)}")
    print(f"windows             {counts.windows}")
    print(f"candidate patches   {counts.candidate_patches}")
    print(f"boxes original      {counts.boxes_original}")
    print(f"boxes after merge   {counts.boxes_after_merge}")
    print(f"boxes removed       {counts.boxes_removed}")
    print(f"patches discarded   {counts.patches_discarded}")
    print(f"patches kept        {counts.patches_kept}")
    return 0


# ---------------------------------------------------------------------------
# split

def cmd_split(args) -> int:
    manifest = load_manifest(args.manifest, check_files=False)
    assignment = assign_folds(manifest.records, args.k, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(assignment.to_json())
    if args.check:
        views = {r.image_id: r.view for r in manifest.records}
        for view, counts in sorted(fold_view_counts(assignment, views).items()):
            print(f"{view}: " + " ".join(str(c) for c in counts))
        if not check_stratified(assignment, views):
            raise CommandError("per-view fold sizes differ by more than one")
        print("stratified: ok")
    return 0


# ---------------------------------------------------------------------------
# evaluate

def _load_gt_dir(path: Path):
    if not path.is_dir():
        raise CommandError(f"ground-truth directory not found: {path}")
    patches = {}
    for xml in sorted(path.glob("*.xml")):
        try:
            p = patch_from_xml(xml.read_text())
        except ValueError as exc:
            raise CommandError(f"{xml}: {exc}") from None
        patches[p.patch_id] = p
    return patches


def _parse_gt_args(specs: list[str]) -> dict[str, Path]:
    out = {}
    for item in specs:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).name, item
        if name in out:
            raise CommandError(f"duplicate ground-truth name {name!r}")
        out[name] = Path(path)
    return out


def _restrict(dets, gt_ids, drop_unmatched: bool, label: str):
    unknown = sorted({d.image_id for d in dets} - gt_ids)
    if unknown and not drop_unmatched:
        shown = ", ".join(unknown[:10]) + (" ..." if len(unknown) > 10 else "")
        raise CommandError(f"{len(unknown)} prediction ids have no ground truth in {label}: {shown} "
                           "(use --drop-unmatched to ignore them)")
    if unknown:
        log.info("%s: dropping predictions on %d patches without ground truth", label, len(unknown))
    return [d for d in dets if d.image_id in gt_ids]


def cmd_evaluate(args) -> int:
    gt_dirs = _parse_gt_args(args.gt)
    dets = read_predictions(args.pred)
    out = Path(args.out)
    thresholds = list(COCO_THRESHOLDS) if args.coco and args.iou is None else (args.iou or [0.5])
    if args.cross_val:
        return _cross_val(args, gt_dirs, dets, thresholds, out)
    with _Staging(out) as tmp:
        for name, path in gt_dirs.items():
            patches = _load_gt_dir(path)
            gts = {pid: p.instances for pid, p in patches.items()}
            mine = _restrict(dets, set(gts), args.drop_unmatched, name)
            size = next(iter(patches.values())).size if patches and args.infestation else None
            try:
                report = evaluate_sweep(mine, gts, thresholds, coco=args.coco, nms_threshold=args.nms,
                                        patch_size=size)
            except ValueError as exc:
                raise CommandError(f"{name}: {exc}") from None
            stem = name if len(gt_dirs) > 1 else "report"
            write_report(report, tmp, stem)
            if args.plot:
                plot_pr_curves(report, tmp, f"{stem}_pr")
            for r in report.results:
                print(f"{name}\tIoU {r.iou:.2f}\tAP {r.ap:.4f}\trecall {r.recall:.4f}\t"
                      f"TP {r.tp}\tFP {r.fp}\tFN {r.fn}")
            if report.coco_map is not None:
                print(f"{name}\tAP@[.50:.95] {report.coco_map:.4f}")
    return 0


def _cross_val(args, gt_dirs, dets, thresholds, out: Path) -> int:
    assignment = FoldAssignment.from_json(Path(args.cross_val).read_text())
    rows = []
    per_fold = []
    for name, path in gt_dirs.items():
        patches = _load_gt_dir(path)
        mine = _restrict(dets, set(patches), args.drop_unmatched, name)
        missing = sorted({p.source_id for p in patches.values()} - set(assignment.folds))
        if missing:
            raise CommandError(f"{name}: source images missing from the assignment: {', '.join(missing[:10])}")
        scores = {t: ([], []) for t in thresholds}
        for fold in range(assignment.k):
            gts = {pid: p.instances for pid, p in patches.items() if assignment.folds[p.source_id] == fold}
            if not any(gts.values()):
                log.info("%s: fold %d has no ground truth, skipped", name, fold)
                continue
            fold_dets = [d for d in mine if d.image_id in gts]
            report = evaluate_sweep(fold_dets, gts, thresholds, nms_threshold=args.nms)
            for r in report.results:
                scores[r.iou][0].append(r.ap)
                scores[r.iou][1].append(r.recall)
                per_fold.append({"condition": name, "fold": fold, **r.row()})
        for t, (aps, recs) in scores.items():
            if not aps:
                raise CommandError(f"{name}: no fold has ground truth")
            ap_m, ap_s = mean_std(aps)
            rc_m, rc_s = mean_std(recs)
            rows.append({"condition": name, "iou": t, "folds": len(aps), "ap_mean": ap_m, "ap_std": ap_s,
                         "recall_mean": rc_m, "recall_std": rc_s})
    with _Staging(out) as tmp:
        (tmp / "cross_val.json").write_text(json.dumps({"summary": rows, "folds": per_fold}, indent=2) + "\n")
        with open(tmp / "cross_val.csv", "w") as fh:
            fh.write("condition,iou,folds,ap_mean,ap_std,recall_mean,recall_std\n")
            for r in rows:
                fh.write(f"{r['condition']},{r['iou']:.2f},{r['folds']},{r['ap_mean']:.6f},{r['ap_std']:.6f},"
                         f"{r['recall_mean']:.6f},{r['recall_std']:.6f}\n")
    names = list(gt_dirs)
    width = max(12, *(len(n) + 2 for n in names))
    print(" " * 12 + "".join(n.rjust(width) for n in names))
    for t in thresholds:
        for metric, key in (("AP", "ap"), ("recall", "recall")):
            cells = []
            for n in names:
                r = next(r for r in rows if r["condition"] == n and r["iou"] == t)
                cells.append(f"{100 * r[key + '_mean']:.1f}±{100 * r[key + '_std']:.2f}".rjust(width))
            print(f"{metric}@{t:.2f}".ljust(12) + "".join(cells))
    return 0


# ---------------------------------------------------------------------------
# synth

def _image_seed(seed: int, index: int) -> int:
    digest = hashlib.blake2b(f"{seed}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def cmd_synth(args) -> int:
    from PIL import Image

    from aphidkit.synth import CONDITIONS, DetectorNoise, SceneConfig, gen_scene, render_scene, simulate_detector

    out = Path(args.out)
    base = replace(CONDITIONS["original"], patch=args.patch or 400, stride=args.stride or 200)
    noise = DetectorNoise(seed=args.seed)
    records, dets = [], []
    with _Staging(out) as tmp:
        for sub in ("images", "masks", "annotations"):
            (tmp / sub).mkdir()
        for i in range(args.images):
            image_id = f"synth_{args.seed}_{i:04d}"
            cfg = SceneConfig(width=args.width, height=args.height, clusters=args.clusters,
                              view=VIEWS[i % len(VIEWS)], seed=_image_seed(args.seed, i))
            scene = gen_scene(cfg, image_id)
            rec = {"annotation": Path("annotations") / f"{image_id}.xml"}
            (tmp / rec["annotation"]).write_text(write_voc_xml(scene.image))
            if not args.annotations_only:
                rec["mask"] = Path("masks") / f"{image_id}.png"
                rec["image"] = Path("images") / f"{image_id}.png"
                save_label_map(tmp / rec["mask"], scene.labels)
                Image.fromarray(render_scene(scene)).save(tmp / rec["image"])
            records.append(ManifestRecord(image_id, scene.image.view, args.width, args.height, **rec))
            if not args.no_predictions:
                comp_map = None if args.annotations_only else scene.labels
                dets.extend(simulate_detector(run_pipeline(scene.image, base, comp_map).patches, noise))
        save_manifest(DatasetManifest(records), tmp / "manifest.json")
        if not args.no_predictions:
            write_predictions(dets, tmp / "predictions.jsonl")
    print(f"wrote {len(records)} images, {len(dets)} predictions to {out}")
    return 0


# ---------------------------------------------------------------------------
# stats

def cmd_stats(args) -> int:
    stats = dataset_stats(load_manifest(args.manifest))
    text = json.dumps(stats.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aphidkit", description="Aphid-cluster dataset and evaluation tools.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more log output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("patchify", help="tile a dataset into annotated patches")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="PipelineConfig JSON; flags override it")
    p.add_argument("--patch", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--merge-px", type=float)
    p.add_argument("--min-fraction", type=float)
    p.add_argument("--no-merge", action="store_true")
    p.add_argument("--no-remove-tiny", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--annotations-only", action="store_true", help="write patch annotations but no image crops")
    p.set_defaults(func=cmd_patchify)

    p = sub.add_parser("split", help="assign source images to stratified folds")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--check", action="store_true", help="print per-view fold sizes and verify them")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("evaluate", help="score predictions against patch annotations")
    p.add_argument("--gt", action="append", required=True, metavar="[NAME=]DIR",
                   help="directory of patch XMLs; repeat for several conditions")
    p.add_argument("--pred", required=True, help="predictions as JSON lines")
    p.add_argument("--out", required=True)
    p.add_argument("--iou", type=_ratio_list, help="comma-separated IoU thresholds (default 0.5)")
    p.add_argument("--coco", action="store_true", help="also report AP averaged over 0.50:0.05:0.95")
    p.add_argument("--nms", type=float, help="run NMS at this IoU before scoring")
    p.add_argument("--plot", action="store_true", help="write SVG PR curves (needs matplotlib)")
    p.add_argument("--infestation", action="store_true", help="include per-patch infestation scores")
    p.add_argument("--drop-unmatched", action="store_true",
                   help="ignore predictions on patches absent from the ground truth")
    p.add_argument("--cross-val", metavar="ASSIGNMENT", help="report mean and std over the folds of ASSIGNMENT")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic dataset with simulated predictions")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", type=int, default=1)
    p.add_argument("--clusters", type=_int_range, default=(10, 20), metavar="N|MIN,MAX")
    p.add_argument("--width", type=int, default=1200)
    p.add_argument("--height", type=int, default=800)
    p.add_argument("--patch", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--annotations-only", action="store_true", help="skip rendered images and masks")
    p.add_argument("--no-predictions", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="dataset summary statistics as JSON")
    p.add_argument("manifest")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "evaluate" and args.nms is not None and not 0.0 <= args.nms <= 1.0:
        parser.error("--nms must lie in [0, 1]")
    if args.command == "patchify" and args.jobs < 1:
        parser.error("--jobs must be at least 1")
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ValueError, OSError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
