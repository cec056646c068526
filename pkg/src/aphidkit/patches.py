"""Overlapping patch tiling and per-patch annotation clean-up."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from aphidkit.annotation import (AnnotatedImage, ClusterInstance, instance_sort_key,
                                 read_voc_provenance, read_voc_truncated, read_voc_xml,
                                 write_voc_xml)
from aphidkit.geometry import BBox, merge_groups


@dataclass(frozen=True)
class PatchGrid:
    width: int
    height: int
    patch: int
    stride: int
    offsets: tuple[tuple[int, int], ...]

    def __len__(self):
        return len(self.offsets)


def axis_offsets(dim: int, patch: int, stride: int) -> list[int]:
    last = dim - patch
    offsets = list(range(0, last + 1, stride))
    if offsets[-1] != last:
        offsets.append(last)
    return offsets


def plan_grid(width: int, height: int, patch: int = 400, stride: int = 200) -> PatchGrid:
    """Row-major window offsets covering the whole image.

    Offsets step by ``stride``; when the last regular step does not land on
    ``dim - patch`` a flush window is appended so the far edge is covered.
    """
    if patch <= 0 or not 1 <= stride <= patch:
        raise ValueError(f"need 1 <= stride <= patch, got patch={patch} stride={stride}")
    if patch > width or patch > height:
        raise ValueError(f"image {width}x{height} is smaller than patch {patch}")
    xs = axis_offsets(width, patch, stride)
    ys = axis_offsets(height, patch, stride)
    return PatchGrid(width, height, patch, stride, tuple((x, y) for y in ys for x in xs))


@dataclass(frozen=True)
class Patch:
    source_id: str
    x_offset: int
    y_offset: int
    size: int
    view: str
    instances: tuple[ClusterInstance, ...] = ()
    clipped: tuple[bool, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        object.__setattr__(self, "clipped", tuple(bool(c) for c in self.clipped))
        if len(self.clipped) != len(self.instances):
            raise ValueError("one clipped flag per instance required")
        for inst in self.instances:
            if inst.box.max_x > self.size or inst.box.max_y > self.size:
                raise ValueError(f"instance box {inst.box.as_tuple()} outside patch of size {self.size}")

    @property
    def patch_id(self) -> str:
        return f"{self.source_id}_x{self.x_offset}_y{self.y_offset}"

    def as_image(self) -> AnnotatedImage:
        return AnnotatedImage(self.patch_id, self.size, self.size, self.view, self.instances)

    def with_instances(self, instances, clipped) -> Patch:
        return replace(self, instances=tuple(instances), clipped=tuple(clipped))


def crop_annotations(image: AnnotatedImage, grid: PatchGrid,
                     component_map: np.ndarray | None = None) -> list[Patch]:
    """Clip every instance to every window, one Patch per window (empties included).

    With ``component_map`` (label values equal to instance ids) the area of a
    clipped instance is recounted from its pixels inside the window, and a
    fragment with no pixels there is dropped. Without it the area is scaled
    by the kept fraction of the box.
    """
    insts = image.instances
    size = grid.patch
    if insts:
        boxes = np.array([i.box.as_tuple() for i in insts], dtype=np.int64)
    else:
        boxes = np.zeros((0, 4), dtype=np.int64)
    patches = []
    for ox, oy in grid.offsets:
        x0 = np.maximum(boxes[:, 0], ox)
        y0 = np.maximum(boxes[:, 1], oy)
        x1 = np.minimum(boxes[:, 2], ox + size)
        y1 = np.minimum(boxes[:, 3], oy + size)
        hit = np.nonzero((x0 < x1) & (y0 < y1))[0]
        counts = None
        out, flags = [], []
        for k in hit.tolist():
            inst = insts[k]
            local = BBox(int(x0[k]) - ox, int(y0[k]) - oy, int(x1[k]) - ox, int(y1[k]) - oy)
            is_clipped = local.area != inst.box.area
            area = inst.area
            if is_clipped:
                if component_map is not None:
                    if counts is None:
                        window = component_map[oy:oy + size, ox:ox + size]
                        counts = np.bincount(window.ravel())
                    area = int(counts[inst.instance_id]) if inst.instance_id < counts.size else 0
                    if area == 0:
                        continue
                elif area is not None:
                    area = max(1, round(area * local.area / inst.box.area))
                source = "clipped" if inst.source == "labeled" else inst.source
            else:
                source = inst.source
            out.append(ClusterInstance(inst.instance_id, local, area, source))
            flags.append(is_clipped)
        order = sorted(range(len(out)), key=lambda i: instance_sort_key(out[i]))
        patches.append(Patch(image.image_id, ox, oy, size, image.view,
                             tuple(out[i] for i in order), tuple(flags[i] for i in order)))
    return patches


def merge_patch(patch: Patch, merge_px: float = 10) -> Patch:
    """Merge nearby boxes within a patch; merged area is the members' area sum."""
    if not patch.instances:
        return patch
    groups = merge_groups([i.box for i in patch.instances], merge_px)
    out, flags = [], []
    for box, members in groups:
        if len(members) == 1:
            out.append(patch.instances[members[0]])
            flags.append(patch.clipped[members[0]])
            continue
        areas = [patch.instances[m].area for m in members]
        area = sum(areas) if all(a is not None for a in areas) else None
        inst_id = min(patch.instances[m].instance_id for m in members)
        out.append(ClusterInstance(inst_id, box, area, "merged"))
        flags.append(any(patch.clipped[m] for m in members))
    return patch.with_instances(out, flags)


def filter_tiny(patch: Patch, min_fraction: float = 0.01) -> Patch:
    """Drop instances whose area is strictly below ``min_fraction`` of the patch."""
    if not 0.0 <= min_fraction <= 1.0:
        raise ValueError("min_fraction must lie in [0, 1]")
    cut = min_fraction * patch.size * patch.size
    keep = [k for k, inst in enumerate(patch.instances) if not inst.effective_area < cut]
    return patch.with_instances([patch.instances[k] for k in keep], [patch.clipped[k] for k in keep])


def discard_empty(patches: Sequence[Patch]) -> list[Patch]:
    return [p for p in patches if p.instances]


@dataclass(frozen=True)
class PipelineConfig:
    patch: int = 400
    stride: int = 200
    merge_px: float = 10
    min_fraction: float = 0.01
    merge: bool = True
    remove_tiny: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> PipelineConfig:
        return cls.from_dict(json.loads(text))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class StageCounts:
    windows: int = 0
    candidate_patches: int = 0
    boxes_original: int = 0
    boxes_after_merge: int = 0
    boxes_removed: int = 0
    patches_discarded: int = 0
    patches_kept: int = 0

    def __iadd__(self, other: StageCounts):
        for k in self.__dataclass_fields__:
            setattr(self, k, getattr(self, k) + getattr(other, k))
        return self


@dataclass
class PipelineResult:
    patches: list[Patch] = field(default_factory=list)
    counts: StageCounts = field(default_factory=StageCounts)


def run_pipeline(image: AnnotatedImage, config: PipelineConfig = PipelineConfig(),
                 component_map: np.ndarray | None = None) -> PipelineResult:
    grid = plan_grid(image.width, image.height, config.patch, config.stride)
    counts = StageCounts(windows=len(grid))
    patches = discard_empty(crop_annotations(image, grid, component_map))
    counts.candidate_patches = len(patches)
    counts.boxes_original = sum(len(p.instances) for p in patches)
    if config.merge:
        patches = [merge_patch(p, config.merge_px) for p in patches]
    counts.boxes_after_merge = sum(len(p.instances) for p in patches)
    if config.remove_tiny:
        patches = [filter_tiny(p, config.min_fraction) for p in patches]
    counts.boxes_removed = counts.boxes_after_merge - sum(len(p.instances) for p in patches)
    kept = discard_empty(patches)
    counts.patches_discarded = len(patches) - len(kept)
    counts.patches_kept = len(kept)
    return PipelineResult(kept, counts)


def pipeline(image: AnnotatedImage, config: PipelineConfig = PipelineConfig(),
             component_map: np.ndarray | None = None) -> list[Patch]:
    """Tile, clip, optionally merge and de-fragment, and drop empty patches."""
    return run_pipeline(image, config, component_map).patches


def patch_to_xml(patch: Patch) -> str:
    provenance = {"source_image": patch.source_id, "x_offset": patch.x_offset, "y_offset": patch.y_offset}
    return write_voc_xml(patch.as_image(), provenance=provenance, truncated=patch.clipped)


def patch_from_xml(document) -> Patch:
    image = read_voc_xml(document)
    prov = read_voc_provenance(document)
    if prov is None:
        raise ValueError("document has no patch provenance")
    if image.width != image.height:
        raise ValueError("patch documents must be square")
    flags = read_voc_truncated(document)
    order = sorted(range(len(image.instances)), key=lambda i: instance_sort_key(image.instances[i]))
    return Patch(prov["source_image"], prov["x_offset"], prov["y_offset"], image.width, image.view,
                 tuple(image.instances[i] for i in order), tuple(flags[i] for i in order))


def crop_pixels(pixels: np.ndarray, patch: Patch) -> np.ndarray:
    return pixels[patch.y_offset:patch.y_offset + patch.size, patch.x_offset:patch.x_offset + patch.size]
