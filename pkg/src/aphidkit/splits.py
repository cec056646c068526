"""View-stratified k-fold assignment at source-image level."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

_MASK64 = (1 << 64) - 1


def splitmix64(seed: int):
    """Infinite stream of 64-bit outputs from the SplitMix64 generator."""
    state = seed & _MASK64
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        yield z ^ (z >> 31)


def _uniform_below(stream, n: int) -> int:
    # rejection sampling keeps the draw unbiased
    limit = (1 << 64) - ((1 << 64) % n)
    while True:
        v = next(stream)
        if v < limit:
            return v % n


def seeded_permutation(items: Sequence, seed: int) -> list:
    """Fisher-Yates shuffle of ``sorted(items)`` driven by SplitMix64(seed)."""
    out = sorted(items)
    stream = splitmix64(seed)
    for i in range(len(out) - 1, 0, -1):
        j = _uniform_below(stream, i + 1)
        out[i], out[j] = out[j], out[i]
    return out


class StratificationError(ValueError):
    def __init__(self, view, count, k):
        super().__init__(f"view {view!r} has {count} images, fewer than k={k} folds")
        self.view = view


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    seed: int
    folds: dict[str, int]

    def fold_of(self, image_id: str) -> int:
        return self.folds[image_id]

    def members(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.folds.items() if f == fold)

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "seed": self.seed, "folds": self.folds},
                          sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> FoldAssignment:
        doc = json.loads(text)
        k = int(doc["k"])
        folds = {str(i): int(f) for i, f in doc["folds"].items()}
        bad = {i: f for i, f in folds.items() if not 0 <= f < k}
        if bad:
            raise ValueError(f"fold indices outside [0, {k}): {bad}")
        return cls(k, int(doc["seed"]), folds)


def assign_folds(images: Iterable, k: int = 10, seed: int = 0) -> FoldAssignment:
    """Shuffle each view's images separately and deal them round-robin into k folds.

    ``images`` are objects with ``image_id`` and ``view`` attributes
    (AnnotatedImage, ManifestRecord). Dealing for each view resumes at the
    fold where the previous view stopped, so total fold sizes also differ by
    at most one.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    by_view = defaultdict(list)
    for img in images:
        if not getattr(img, "view", None):
            raise ValueError(f"image {img.image_id!r} has no view tag")
        by_view[img.view].append(img.image_id)
    folds = {}
    cursor = 0
    for view in sorted(by_view):
        ids = by_view[view]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate image ids in view {view!r}")
        if len(ids) < k:
            raise StratificationError(view, len(ids), k)
        for n, image_id in enumerate(seeded_permutation(ids, seed)):
            if image_id in folds:
                raise ValueError(f"image {image_id!r} appears in more than one view")
            folds[image_id] = (cursor + n) % k
        cursor = (cursor + len(ids)) % k
    return FoldAssignment(k, seed, folds)


def fold_view_counts(assignment: FoldAssignment, views: dict[str, str]) -> dict[str, list[int]]:
    """Per-view image counts for each fold; ``views`` maps image id to view."""
    out = defaultdict(lambda: [0] * assignment.k)
    for image_id, fold in assignment.folds.items():
        out[views[image_id]][fold] += 1
    return dict(out)


def check_stratified(assignment: FoldAssignment, views: dict[str, str]) -> bool:
    return all(max(c) - min(c) <= 1 for c in fold_view_counts(assignment, views).values())


class UnknownSourceError(KeyError):
    pass


def materialize_split(assignment: FoldAssignment, patches: Sequence, test_fold: int):
    """Split patches into (train, test) by the fold of their source image."""
    if not 0 <= test_fold < assignment.k:
        raise ValueError(f"test_fold must lie in [0, {assignment.k})")
    train, test = [], []
    for p in patches:
        try:
            fold = assignment.folds[p.source_id]
        except KeyError:
            raise UnknownSourceError(f"patch {p.patch_id} comes from unassigned image {p.source_id!r}") from None
        (test if fold == test_fold else train).append(p)
    return train, test
