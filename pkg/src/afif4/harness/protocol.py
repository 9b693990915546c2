"""Class-balanced k-fold assignment and the 75/15/10 training-set split."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from ..imagecore import FEMALE, MALE, DatasetManifest, SampleRecord


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    assignments: Mapping[str, int]
    discarded: tuple[str, ...] = ()

    def fold_of(self, image_path: str) -> int | None:
        return self.assignments.get(image_path)

    def members(self, fold: int) -> list[str]:
        return [p for p, f in self.assignments.items() if f == fold]

    def apply(self, manifest: DatasetManifest) -> DatasetManifest:
        """Copy of the manifest with fold ids set; discarded records get no fold."""
        return manifest.with_records(
            replace(r, fold=self.assignments.get(r.image_path)) for r in manifest.records)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, k: int | None = None,
                      seed: int = 0) -> "FoldPlan":
        """Plan read back from fold ids already stored in a manifest."""
        assigned = {r.image_path: r.fold for r in manifest.records if r.fold is not None}
        if not assigned:
            raise ProtocolError("manifest has no fold assignments")
        k = k or max(assigned.values()) + 1
        manifest.check_folds(k)
        discarded = tuple(r.image_path for r in manifest.records if r.fold is None)
        return cls(k, seed, assigned, discarded)


def make_folds(manifest: DatasetManifest, k: int = 5, seed: int = 0) -> FoldPlan:
    """Discard random excess samples of the larger class, then deal each class round-robin."""
    if k < 2:
        raise ProtocolError(f"need k >= 2 folds, got {k}")
    males = [r.image_path for r in manifest.records if r.gender == MALE]
    females = [r.image_path for r in manifest.records if r.gender == FEMALE]
    if len(males) < k or len(females) < k:
        raise ProtocolError(f"need at least {k} samples per class, have {len(males)} male "
                            f"and {len(females)} female")
    rng = np.random.default_rng(seed)
    n = min(len(males), len(females))
    discarded: list[str] = []
    kept = {}
    for name, group in (("male", males), ("female", females)):
        if len(group) > n:
            keep = set(rng.choice(len(group), size=n, replace=False).tolist())
            discarded.extend(p for i, p in enumerate(group) if i not in keep)
            group = [p for i, p in enumerate(group) if i in keep]
        kept[name] = group
    assignments: dict[str, int] = {}
    for name in ("male", "female"):
        group = kept[name]
        for pos, idx in enumerate(rng.permutation(len(group))):
            assignments[group[idx]] = pos % k
    ordered = {r.image_path: assignments[r.image_path]
               for r in manifest.records if r.image_path in assignments}
    return FoldPlan(k, seed, ordered, tuple(discarded))


@dataclass(frozen=True)
class SplitPlan:
    """Index sets into a training list: CNN, AdaBoost and fusion portions."""

    cnn: tuple[int, ...]
    adaboost: tuple[int, ...]
    fusion: tuple[int, ...]
    seed: int

    @property
    def total(self) -> int:
        return len(self.cnn) + len(self.adaboost) + len(self.fusion)

    def take(self, items: Sequence, portion: str) -> list:
        return [items[i] for i in getattr(self, portion)]


SPLIT_PERCENT = (75, 15, 10)


def split_sizes(n: int) -> tuple[int, int, int]:
    """Largest-remainder rounding of 75% / 15% / 10% of ``n``; ties go to the earlier portion.

    Every portion ends up strictly less than one sample away from its exact share.
    """
    floors = [n * p // 100 for p in SPLIT_PERCENT]
    remainders = [n * p % 100 for p in SPLIT_PERCENT]
    for i in sorted(range(3), key=lambda i: (-remainders[i], i))[:n - sum(floors)]:
        floors[i] += 1
    return floors[0], floors[1], floors[2]


def make_splits(training_samples: Sequence, seed: int = 0,
                labels: Sequence | None = None) -> SplitPlan:
    """Seeded shuffle, then CNN / AdaBoost / fusion portions sized by ``split_sizes``.

    With ``labels`` the shuffle is stratified: each class is permuted on its own and the
    classes are interleaved in one fixed class order, so any run of consecutive samples
    sees both classes until the smaller class runs out.
    The small portions are cut from the front of that order, where the interleave is tight.
    """
    n = len(training_samples)
    if n < 8:
        raise ProtocolError(f"need at least 8 training samples to split, got {n}")
    rng = np.random.default_rng(seed)
    if labels is None:
        order = rng.permutation(n).tolist()
    else:
        if len(labels) != n:
            raise ProtocolError(f"{len(labels)} labels for {n} samples")
        labels = np.asarray(labels)
        rank = np.empty(n)
        slot = np.empty(n)
        classes = np.unique(labels)
        for pos, cls in zip(rng.permutation(len(classes)), classes):
            members = np.flatnonzero(labels == cls)
            rank[rng.permutation(members)] = np.arange(len(members))
            slot[members] = pos
        order = np.lexsort((slot, rank)).tolist()
    cnn, ada, fus = split_sizes(n)
    return SplitPlan(tuple(sorted(order[fus + ada:])), tuple(sorted(order[fus:fus + ada])),
                     tuple(sorted(order[:fus])), seed)


def training_records(manifest: DatasetManifest, plan: FoldPlan, fold: int) -> list[SampleRecord]:
    if not 0 <= fold < plan.k:
        raise ProtocolError(f"fold {fold} outside [0, {plan.k})")
    return [r for r in manifest.records
            if plan.fold_of(r.image_path) is not None and plan.fold_of(r.image_path) != fold]


def testing_records(manifest: DatasetManifest, plan: FoldPlan, fold: int) -> list[SampleRecord]:
    if not 0 <= fold < plan.k:
        raise ProtocolError(f"fold {fold} outside [0, {plan.k})")
    return [r for r in manifest.records if plan.fold_of(r.image_path) == fold]
