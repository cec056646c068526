"""Synthetic cluster scenes and a noisy stand-in detector.

Scenes are label maps of elliptical aphid-cluster blobs, each seeded with at
least six aphid dots. Some blobs are placed within a few pixels of a
neighbour and some straddle patch grid lines, the two situations the
merge and tiny-removal stages target.

The simulated detector sees a patch the way a trained model would regardless
of how it was labeled: it reports nearby clusters as one object, localizes
small objects poorly and often misses them, splits small border fragments
into pieces, and adds duplicates and spurious boxes.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from aphidkit.annotation import VIEWS, AnnotatedImage, label_components
from aphidkit.evaluation import average_precision, recall_overall
from aphidkit.geometry import BBox, Detection, InstanceMask
from aphidkit.patches import Patch, PipelineConfig, merge_patch, run_pipeline

MIN_DOTS = 6


@dataclass(frozen=True)
class SceneConfig:
    width: int = 1200
    height: int = 800
    clusters: tuple[int, int] = (10, 20)
    # log-normal blob area; median and spread follow the reported mask sizes
    area_median: float = 1442.0
    area_sigma: float = 1.84
    area_min: int = 150
    area_max: int = 40000
    neighbor_fraction: float = 0.2
    neighbor_gap: tuple[int, int] = (1, 10)
    border_fraction: float = 0.2
    border_stride: int = 200
    view: str | None = None
    seed: int = 0
    max_attempts: int = 500

    def __post_init__(self):
        for name in ("neighbor_fraction", "border_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.clusters
        if lo < 0 or hi < lo:
            raise ValueError("clusters must be a (min, max) range with 0 <= min <= max")
        if self.width <= 0 or self.height <= 0 or self.area_min <= 0 or self.area_max < self.area_min:
            raise ValueError("sizes must be positive")
        if self.area_median <= 0 or self.area_sigma < 0:
            raise ValueError("area distribution parameters must be positive")
        if self.view is not None and self.view not in VIEWS:
            raise ValueError(f"unknown view {self.view!r}")


@dataclass(frozen=True)
class DetectorNoise:
    jitter_px: float = 2.0
    jitter_frac: float = 0.05
    miss_prob: float = 0.03
    small_area: int = 1600
    small_miss_prob: float = 0.3
    small_jitter_frac: float = 0.15
    small_score_scale: float = 0.5
    group_px: float | None = 10
    border_split_prob: float = 0.6
    duplicate_prob: float = 0.1
    spurious_rate: float = 0.3
    true_score: tuple[float, float] = (6.0, 2.0)
    spurious_score: tuple[float, float] = (1.5, 6.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("miss_prob", "small_miss_prob", "border_split_prob", "duplicate_prob",
                     "small_score_scale"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.jitter_px < 0 or self.jitter_frac < 0 or self.small_jitter_frac < 0 or self.spurious_rate < 0:
            raise ValueError("jitter and spurious rate must be non-negative")

    @classmethod
    def perfect(cls, seed: int = 0) -> DetectorNoise:
        """A detector that reproduces the ground truth exactly."""
        return cls(jitter_px=0.0, jitter_frac=0.0, miss_prob=0.0, small_miss_prob=0.0,
                   small_jitter_frac=0.0, small_score_scale=1.0, group_px=None,
                   border_split_prob=0.0, duplicate_prob=0.0, spurious_rate=0.0, seed=seed)


@dataclass
class SyntheticScene:
    image: AnnotatedImage
    labels: np.ndarray  # component map, values equal instance ids
    dots: list[np.ndarray] = field(default_factory=list)

    @property
    def mask(self) -> InstanceMask:
        return InstanceMask(self.labels)


class PlacementError(ValueError):
    pass


def _ellipse(area: float, rng: np.random.Generator):
    """Pixel offsets (dy, dx) of a rotated ellipse with about ``area`` pixels."""
    q = rng.uniform(0.5, 1.0)
    a = math.sqrt(area / (math.pi * q))
    b = q * a
    theta = rng.uniform(0, math.pi)
    c, s = math.cos(theta), math.sin(theta)
    hx = math.ceil(math.sqrt((a * c) ** 2 + (b * s) ** 2))
    hy = math.ceil(math.sqrt((a * s) ** 2 + (b * c) ** 2))
    yy, xx = np.mgrid[-hy:hy + 1, -hx:hx + 1]
    u = (xx * c + yy * s) / a
    v = (-xx * s + yy * c) / b
    inside = u * u + v * v <= 1.0
    if not inside.any():
        inside[hy, hx] = True
    ys, xs = np.nonzero(inside)
    ys, xs = ys - ys.min(), xs - xs.min()
    return ys, xs


def _box_of(ys, xs, y0, x0) -> BBox:
    return BBox(int(x0 + xs.min()), int(y0 + ys.min()), int(x0 + xs.max()) + 1, int(y0 + ys.max()) + 1)


def gen_scene(config: SceneConfig = SceneConfig(), image_id: str | None = None) -> SyntheticScene:
    """Draw a scene of non-overlapping cluster blobs; deterministic per seed."""
    rng = np.random.default_rng(config.seed)
    view = config.view or VIEWS[int(rng.integers(len(VIEWS)))]
    image_id = image_id or f"synth_{config.seed}"
    n = int(rng.integers(config.clusters[0], config.clusters[1] + 1))
    labels = np.zeros((config.height, config.width), dtype=np.int32)
    occupied = np.zeros_like(labels, dtype=bool)  # blobs plus a 1 px halo
    boxes: list[BBox] = []
    anchors = []
    dots = []
    for k in range(1, n + 1):
        area = float(np.clip(rng.lognormal(math.log(config.area_median), config.area_sigma),
                             config.area_min, config.area_max))
        mode = "uniform"
        if boxes and rng.random() < config.neighbor_fraction:
            mode = "neighbor"
        elif rng.random() < config.border_fraction:
            mode = "border"
        for _ in range(config.max_attempts):
            ys, xs = _ellipse(area, rng)
            h, w = int(ys.max()) + 1, int(xs.max()) + 1
            if h > config.height or w > config.width:
                area *= 0.7
                continue
            if mode == "neighbor":
                t = boxes[int(rng.integers(len(boxes)))]
                g = int(rng.integers(config.neighbor_gap[0], config.neighbor_gap[1] + 1))
                side = int(rng.integers(4))
                if side == 0:
                    x0, y0 = t.max_x + g, int(rng.integers(t.min_y - h + 1, t.max_y))
                elif side == 1:
                    x0, y0 = t.min_x - g - w, int(rng.integers(t.min_y - h + 1, t.max_y))
                elif side == 2:
                    x0, y0 = int(rng.integers(t.min_x - w + 1, t.max_x)), t.max_y + g
                else:
                    x0, y0 = int(rng.integers(t.min_x - w + 1, t.max_x)), t.min_y - g - h
            elif mode == "border":
                lines_x = list(range(config.border_stride, config.width, config.border_stride))
                lines_y = list(range(config.border_stride, config.height, config.border_stride))
                if lines_x and (not lines_y or rng.random() < 0.5):
                    x0 = int(lines_x[int(rng.integers(len(lines_x)))] - rng.integers(1, w)) if w > 1 else 0
                    y0 = int(rng.integers(0, config.height - h + 1))
                elif lines_y:
                    x0 = int(rng.integers(0, config.width - w + 1))
                    y0 = int(lines_y[int(rng.integers(len(lines_y)))] - rng.integers(1, h)) if h > 1 else 0
                else:
                    x0 = int(rng.integers(0, config.width - w + 1))
                    y0 = int(rng.integers(0, config.height - h + 1))
            else:
                x0 = int(rng.integers(0, config.width - w + 1))
                y0 = int(rng.integers(0, config.height - h + 1))
            if x0 < 0 or y0 < 0 or x0 + w > config.width or y0 + h > config.height:
                continue
            if occupied[ys + y0, xs + x0].any():
                continue
            break
        else:
            raise PlacementError(f"could not place cluster {k} of {n} after {config.max_attempts} attempts")
        labels[ys + y0, xs + x0] = k
        sl = (slice(max(y0 - 1, 0), y0 + h + 1), slice(max(x0 - 1, 0), x0 + w + 1))
        occupied[sl] |= ndimage.binary_dilation(labels[sl] == k, structure=np.ones((3, 3), bool))
        boxes.append(_box_of(ys, xs, y0, x0))
        anchors.append((int(xs[0] + x0), int(ys[0] + y0)))
        n_dots = max(MIN_DOTS, int(ys.size // 60))
        pick = rng.choice(ys.size, size=min(n_dots, ys.size), replace=False)
        dots.append(np.stack([xs[pick] + x0, ys[pick] + y0], axis=1))
    comp_map, instances = label_components(labels)
    # each blob is one component; reorder dots to the relabeled instance ids
    ids = [int(comp_map[y, x]) for x, y in anchors]
    dots = [d for _, d in sorted(zip(ids, dots), key=lambda t: t[0])]
    image = AnnotatedImage(image_id, config.width, config.height, view, tuple(instances))
    return SyntheticScene(image, comp_map, dots)


def render_scene(scene: SyntheticScene) -> np.ndarray:
    """RGB rendering: leaf-green background, dark aphid dots."""
    h, w = scene.labels.shape
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[...] = (96, 140, 70)
    img[scene.labels > 0] = (120, 150, 90)
    for pts in scene.dots:
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                x = np.clip(pts[:, 0] + dx, 0, w - 1)
                y = np.clip(pts[:, 1] + dy, 0, h - 1)
                img[y, x] = (40, 35, 25)
    return img


def _patch_rng(seed: int, patch_id: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{seed}:{patch_id}".encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _jitter(box: BBox, frac: float, px: float, size: int, rng) -> BBox | None:
    sx = math.hypot(px, frac * box.width)
    sy = math.hypot(px, frac * box.height)
    x0 = box.min_x + rng.normal(0, sx) if sx else box.min_x
    x1 = box.max_x + rng.normal(0, sx) if sx else box.max_x
    y0 = box.min_y + rng.normal(0, sy) if sy else box.min_y
    y1 = box.max_y + rng.normal(0, sy) if sy else box.max_y
    x0, y0 = max(0, int(round(x0))), max(0, int(round(y0)))
    x1, y1 = min(size, int(round(x1))), min(size, int(round(y1)))
    if x0 >= x1 or y0 >= y1:
        return None
    return BBox(x0, y0, x1, y1)


def _halves(box: BBox) -> list[BBox]:
    if box.width >= box.height and box.width > 1:
        mid = box.min_x + box.width // 2
        return [BBox(box.min_x, box.min_y, mid, box.max_y), BBox(mid, box.min_y, box.max_x, box.max_y)]
    if box.height > 1:
        mid = box.min_y + box.height // 2
        return [BBox(box.min_x, box.min_y, box.max_x, mid), BBox(box.min_x, mid, box.max_x, box.max_y)]
    return [box]


def _score(rng, params, scale=1.0) -> float:
    return float(np.clip(rng.beta(*params) * scale, 0.0, 1.0))


def detect_patch(patch: Patch, noise: DetectorNoise) -> list[Detection]:
    rng = _patch_rng(noise.seed, patch.patch_id)
    perceived = merge_patch(patch, noise.group_px) if noise.group_px is not None else patch
    size = patch.size
    out = []
    for inst, clipped in zip(perceived.instances, perceived.clipped):
        small = inst.effective_area < noise.small_area
        if rng.random() < (noise.small_miss_prob if small else noise.miss_prob):
            continue
        scale = noise.small_score_scale if small else 1.0
        if small and clipped and rng.random() < noise.border_split_prob:
            for piece in _halves(inst.box):
                b = _jitter(piece, noise.small_jitter_frac, noise.jitter_px, size, rng)
                if b is not None:
                    out.append(Detection(patch.patch_id, b, _score(rng, noise.true_score, scale)))
            continue
        frac = noise.small_jitter_frac if small else noise.jitter_frac
        b = _jitter(inst.box, frac, noise.jitter_px, size, rng)
        if b is not None:
            out.append(Detection(patch.patch_id, b, _score(rng, noise.true_score, scale)))
        if rng.random() < noise.duplicate_prob:
            part = _halves(inst.box)[int(rng.integers(2))] if inst.box.area > 1 else inst.box
            out.append(Detection(patch.patch_id, part, _score(rng, noise.true_score, 0.6 * scale)))
    for _ in range(int(rng.poisson(noise.spurious_rate))):
        w, h = (int(v) for v in rng.integers(12, 60, size=2))
        x0, y0 = int(rng.integers(0, size - w)), int(rng.integers(0, size - h))
        out.append(Detection(patch.patch_id, BBox(x0, y0, x0 + w, y0 + h), _score(rng, noise.spurious_score)))
    return out


def simulate_detector(patches: Sequence[Patch], noise: DetectorNoise = DetectorNoise()) -> list[Detection]:
    """Noisy predictions for each patch; deterministic per (seed, patch id)."""
    out = []
    for p in patches:
        out.extend(detect_patch(p, noise))
    return out


CONDITIONS = {
    "original": PipelineConfig(merge=False, remove_tiny=False),
    "+merge10": PipelineConfig(merge=True, remove_tiny=False),
    "+rm0.01": PipelineConfig(merge=True, remove_tiny=True),
}


@dataclass
class TrendResult:
    seeds: list[int]
    ap: dict[str, dict[float, list[float]]]
    recall: dict[str, dict[float, list[float]]]

    def mean_ap(self, condition: str, iou: float = 0.5) -> float:
        return float(np.mean(self.ap[condition][iou]))

    def mean_recall(self, condition: str, iou: float = 0.5) -> float:
        return float(np.mean(self.recall[condition][iou]))


def evaluate_scene(scene: SyntheticScene, noise: DetectorNoise, ious: Sequence[float] = (0.5,),
                   patch: int = 400, stride: int = 200):
    """Per-condition {iou: (AP, recall)} for one scene and one simulated detector."""
    base = replace(CONDITIONS["original"], patch=patch, stride=stride)
    dets = simulate_detector(run_pipeline(scene.image, base, scene.labels).patches, noise)
    out = {}
    for name, cfg in CONDITIONS.items():
        patches = run_pipeline(scene.image, replace(cfg, patch=patch, stride=stride), scene.labels).patches
        gts = {p.patch_id: p.instances for p in patches}
        mine = [d for d in dets if d.image_id in gts]
        if not gts:
            out[name] = None
            continue
        out[name] = {t: (average_precision(mine, gts, t)[0], recall_overall(mine, gts, t)) for t in ious}
    return out


def run_trend(seeds: Sequence[int], scene: SceneConfig = SceneConfig(),
              noise: DetectorNoise = DetectorNoise(), ious: Sequence[float] = (0.25, 0.5, 0.75)) -> TrendResult:
    """Evaluate every condition on one synthetic scene per seed."""
    ap = {c: {t: [] for t in ious} for c in CONDITIONS}
    rec = {c: {t: [] for t in ious} for c in CONDITIONS}
    used = []
    for s in seeds:
        sc = gen_scene(replace(scene, seed=s))
        res = evaluate_scene(sc, replace(noise, seed=s), ious)
        if any(v is None for v in res.values()):
            continue
        used.append(s)
        for c, per in res.items():
            for t, (a, r) in per.items():
                ap[c][t].append(a)
                rec[c][t].append(r)
    return TrendResult(used, ap, rec)
