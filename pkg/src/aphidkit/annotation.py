"""Cluster extraction from label maps, VOC XML I/O, manifests and statistics."""
from __future__ import annotations

import json
import statistics
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from aphidkit.geometry import BBox, InstanceMask

VIEWS = ("view1", "view2", "view3")
SOURCES = ("labeled", "merged", "clipped")
CLASS_NAME = "aphid_cluster"
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ClusterInstance:
    instance_id: int
    box: BBox
    area: int | None = None
    source: str = "labeled"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if self.area is not None and self.area <= 0:
            raise ValueError("area must be positive")

    @property
    def effective_area(self) -> int:
        """Mask area when known, box area otherwise."""
        return self.area if self.area is not None else self.box.area


@dataclass(frozen=True)
class AnnotatedImage:
    image_id: str
    width: int
    height: int
    view: str
    instances: tuple[ClusterInstance, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.view not in VIEWS:
            raise ValueError(f"view must be one of {VIEWS}, got {self.view!r}")
        for inst in self.instances:
            if inst.box.max_x > self.width or inst.box.max_y > self.height:
                raise ValueError(f"instance {inst.instance_id} box {inst.box.as_tuple()} "
                                 f"exceeds image {self.width}x{self.height}")


def instance_sort_key(inst: ClusterInstance):
    return (inst.box.sort_key(), inst.instance_id)


# ---------------------------------------------------------------------------
# label maps

def label_components(mask) -> tuple[np.ndarray, list[ClusterInstance]]:
    """Split a label map into 8-connected single-label components.

    Components are numbered 1..N in raster-scan order of their first pixel.
    Returns the renumbered component map and the instance list.
    """
    labels = mask.labels if isinstance(mask, InstanceMask) else np.asarray(mask)
    height, width = labels.shape
    comp_map = np.zeros(labels.shape, dtype=np.int32)
    found = []  # (first raster index, label value, slice, local component map, local id)
    for value, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        local, n = ndimage.label(labels[sl] == value, structure=_EIGHT)
        ys, xs = np.nonzero(local)
        comp = local[ys, xs]
        first_ids, first_pos = np.unique(comp, return_index=True)
        y0, x0 = sl[0].start, sl[1].start
        for c, p in zip(first_ids.tolist(), first_pos.tolist()):
            found.append(((ys[p] + y0) * width + xs[p] + x0, sl, local, c))
    found.sort(key=lambda item: item[0])
    instances = []
    for new_id, (_, sl, local, c) in enumerate(found, start=1):
        region = local == c
        comp_map[sl][region] = new_id
        ys, xs = np.nonzero(region)
        y0, x0 = sl[0].start, sl[1].start
        box = BBox(int(xs.min()) + x0, int(ys.min()) + y0, int(xs.max()) + x0 + 1, int(ys.max()) + y0 + 1)
        instances.append(ClusterInstance(new_id, box, int(ys.size), "labeled"))
    return comp_map, instances


def extract_clusters(mask) -> list[ClusterInstance]:
    """One instance per 8-connected component of each nonzero label."""
    return label_components(mask)[1]


def save_label_map(path, labels: np.ndarray) -> None:
    arr = np.asarray(labels)
    if arr.size and (arr.min() < 0 or arr.max() > 65535):
        raise ValueError("label map values must fit in 16 bits")
    Image.fromarray(arr.astype(np.uint16)).save(path, format="PNG")


class MaskReadError(IOError):
    def __init__(self, path, reason):
        super().__init__(f"cannot read mask {path}: {reason}")
        self.path = Path(path)


def load_label_map(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("I;16", "I;16B", "I", "L"):
                raise ValueError(f"expected a single-channel label map, got mode {im.mode}")
            return np.asarray(im).astype(np.int32)
    except (OSError, ValueError) as exc:
        raise MaskReadError(path, exc) from exc


# ---------------------------------------------------------------------------
# VOC XML

class VocParseError(ValueError):
    """Malformed annotation document. ``object_index`` is set for per-object faults."""

    def __init__(self, message, object_index=None):
        if object_index is not None:
            message = f"object {object_index}: {message}"
        super().__init__(message)
        self.object_index = object_index


def _sub(parent, tag, text=None):
    el = ET.SubElement(parent, tag)
    if text is not None:
        el.text = str(text)
    return el


def write_voc_xml(image: AnnotatedImage, provenance: dict | None = None,
                  truncated: Sequence[bool] | None = None) -> str:
    """Serialize an image record as a PASCAL-VOC style document.

    Boxes are written 1-based inclusive. Objects are ordered by (min_y, min_x).
    ``provenance`` (source_image, x_offset, y_offset) marks a patch document.
    """
    root = ET.Element("annotation")
    _sub(root, "filename", image.image_id)
    _sub(root, "view", image.view)
    if provenance is not None:
        p = _sub(root, "patch")
        _sub(p, "source_image", provenance["source_image"])
        _sub(p, "x_offset", int(provenance["x_offset"]))
        _sub(p, "y_offset", int(provenance["y_offset"]))
    size = _sub(root, "size")
    _sub(size, "width", image.width)
    _sub(size, "height", image.height)
    _sub(size, "depth", 3)
    _sub(root, "segmented", 0)
    if truncated is None:
        truncated = [inst.source == "clipped" for inst in image.instances]
    order = sorted(range(len(image.instances)), key=lambda i: instance_sort_key(image.instances[i]))
    for i in order:
        inst = image.instances[i]
        obj = _sub(root, "object")
        _sub(obj, "name", CLASS_NAME)
        _sub(obj, "instance_id", inst.instance_id)
        _sub(obj, "origin", inst.source)
        if inst.area is not None:
            _sub(obj, "area", inst.area)
        _sub(obj, "truncated", int(bool(truncated[i])))
        _sub(obj, "difficult", 0)
        bb = _sub(obj, "bndbox")
        _sub(bb, "xmin", inst.box.min_x + 1)
        _sub(bb, "ymin", inst.box.min_y + 1)
        _sub(bb, "xmax", inst.box.max_x)
        _sub(bb, "ymax", inst.box.max_y)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def _int(el, tag, object_index=None):
    child = el.find(tag)
    if child is None or child.text is None:
        raise VocParseError(f"missing <{tag}>", object_index)
    try:
        return int(float(child.text.strip()))
    except ValueError:
        raise VocParseError(f"<{tag}> is not a number: {child.text!r}", object_index) from None


def _parse_root(document):
    if isinstance(document, ET.Element):
        return document
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise VocParseError(f"malformed XML: {exc}") from None
    if root.tag != "annotation":
        raise VocParseError(f"root element is <{root.tag}>, expected <annotation>")
    return root


def read_voc_xml(document, default_view: str | None = None) -> AnnotatedImage:
    """Parse a document produced by :func:`write_voc_xml` (or plain VOC).

    Unknown elements are ignored; objects keep their declared order.
    """
    root = _parse_root(document)
    size = root.find("size")
    if size is None:
        raise VocParseError("missing <size>")
    width, height = _int(size, "width"), _int(size, "height")
    if width <= 0 or height <= 0:
        raise VocParseError(f"invalid size {width}x{height}")
    view_el = root.find("view")
    view = view_el.text.strip() if view_el is not None and view_el.text else default_view
    if view not in VIEWS:
        raise VocParseError(f"missing or unknown <view>: {view!r}")
    name_el = root.find("filename")
    image_id = name_el.text.strip() if name_el is not None and name_el.text else ""
    instances = []
    for idx, obj in enumerate(root.findall("object")):
        bb = obj.find("bndbox")
        if bb is None:
            raise VocParseError("missing <bndbox>", idx)
        xmin, ymin = _int(bb, "xmin", idx), _int(bb, "ymin", idx)
        xmax, ymax = _int(bb, "xmax", idx), _int(bb, "ymax", idx)
        if xmax < xmin or ymax < ymin:
            raise VocParseError(f"inverted box ({xmin},{ymin},{xmax},{ymax})", idx)
        if xmin < 1 or ymin < 1 or xmax > width or ymax > height:
            raise VocParseError(f"box ({xmin},{ymin},{xmax},{ymax}) outside {width}x{height}", idx)
        box = BBox(xmin - 1, ymin - 1, xmax, ymax)
        inst_id = _int(obj, "instance_id", idx) if obj.find("instance_id") is not None else idx + 1
        area = _int(obj, "area", idx) if obj.find("area") is not None else None
        origin_el = obj.find("origin")
        origin = origin_el.text.strip() if origin_el is not None and origin_el.text else "labeled"
        try:
            instances.append(ClusterInstance(inst_id, box, area, origin))
        except ValueError as exc:
            raise VocParseError(str(exc), idx) from None
    return AnnotatedImage(image_id, width, height, view, tuple(instances))


def read_voc_truncated(document) -> list[bool]:
    root = _parse_root(document)
    return [obj.findtext("truncated", "0").strip() == "1" for obj in root.findall("object")]


def read_voc_provenance(document) -> dict | None:
    """Patch provenance (source_image, x_offset, y_offset), or None for full images."""
    root = _parse_root(document)
    p = root.find("patch")
    if p is None:
        return None
    src = p.findtext("source_image")
    if not src:
        raise VocParseError("patch element without <source_image>")
    return {"source_image": src.strip(), "x_offset": _int(p, "x_offset"), "y_offset": _int(p, "y_offset")}


# ---------------------------------------------------------------------------
# manifests

@dataclass(frozen=True)
class ManifestRecord:
    image_id: str
    view: str
    width: int
    height: int
    image: Path | None = None
    mask: Path | None = None
    annotation: Path | None = None


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def __post_init__(self):
        ids = [r.image_id for r in self.records]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ValueError(f"duplicate image ids: {dupes}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


class ManifestError(ValueError):
    pass


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    base = path.parent
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot load manifest {path}: {exc}") from exc
    records = []
    for i, rec in enumerate(doc.get("images", [])):
        try:
            image_id = str(rec["id"])
            view = rec["view"]
            width, height = int(rec["width"]), int(rec["height"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"manifest record {i}: missing or invalid field {exc}") from None
        if view not in VIEWS:
            raise ManifestError(f"manifest record {i} ({image_id}): unknown view {view!r}")
        paths = {}
        for key in ("image", "mask", "annotation"):
            if rec.get(key):
                p = base / rec[key]
                if check_files and not p.exists():
                    raise ManifestError(f"manifest record {i} ({image_id}): {key} file not found: {p}")
                paths[key] = p
        records.append(ManifestRecord(image_id, view, width, height, **paths))
    try:
        return DatasetManifest(records)
    except ValueError as exc:
        raise ManifestError(str(exc)) from None


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    images = []
    for r in manifest.records:
        rec = {"id": r.image_id}
        for key in ("image", "mask", "annotation"):
            p = getattr(r, key)
            if p is not None:
                rec[key] = Path(p).relative_to(path.parent).as_posix() if Path(p).is_absolute() else Path(p).as_posix()
        rec.update(view=r.view, width=r.width, height=r.height)
        images.append(rec)
    path.write_text(json.dumps({"images": images}, indent=2) + "\n")


def load_record(record: ManifestRecord) -> tuple[AnnotatedImage, np.ndarray | None]:
    """Instances for one manifest record, plus the component map when a mask exists."""
    if record.mask is not None:
        labels = load_label_map(record.mask)
        if labels.shape != (record.height, record.width):
            raise MaskReadError(record.mask, f"shape {labels.shape[::-1]} does not match "
                                             f"{record.width}x{record.height}")
        comp_map, instances = label_components(labels)
        return AnnotatedImage(record.image_id, record.width, record.height, record.view, tuple(instances)), comp_map
    if record.annotation is not None:
        parsed = read_voc_xml(Path(record.annotation).read_text(), default_view=record.view)
        return AnnotatedImage(record.image_id, record.width, record.height, record.view, parsed.instances), None
    return AnnotatedImage(record.image_id, record.width, record.height, record.view), None


# ---------------------------------------------------------------------------
# statistics

@dataclass
class DatasetStats:
    num_images: int
    num_clusters: int
    view_percent: dict[str, float]
    hist_edges: list[int]
    hist_counts: list[int]
    fraction_below_5000: float
    median_area: float
    mean_area: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def area_statistics(areas: Sequence[int], bin_width: int = 100, limit: int = 5000):
    """Histogram (of areas below ``limit``), median and mean of mask areas."""
    edges = list(range(0, limit + bin_width, bin_width))
    small = [a for a in areas if a < limit]
    counts, _ = np.histogram(np.asarray(small, dtype=np.int64), bins=edges)
    below = len(small)
    return {
        "hist_edges": edges,
        "hist_counts": [int(c) for c in counts],
        "fraction_below_5000": below / len(areas) if areas else 0.0,
        "median_area": float(statistics.median(areas)) if areas else 0.0,
        "mean_area": float(statistics.fmean(areas)) if areas else 0.0,
    }


def dataset_stats(manifest: DatasetManifest) -> DatasetStats:
    areas = []
    views = {v: 0 for v in VIEWS}
    for record in manifest:
        image, _ = load_record(record)
        views[record.view] += 1
        areas.extend(inst.effective_area for inst in image.instances)
    n = len(manifest)
    return DatasetStats(
        num_images=n,
        num_clusters=len(areas),
        view_percent={v: (100.0 * c / n if n else 0.0) for v, c in views.items()},
        **area_statistics(areas),
    )
