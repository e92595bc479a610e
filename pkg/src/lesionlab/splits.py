"""Deterministic per-class stratified splitting.

Counts per split follow largest-remainder (Hamilton) apportionment so the
70/15/15 contract is exact, not approximate. Shuffling within a class is a
pure function of (seed, class name), so re-runs are byte-identical.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .errors import ClassTooSmall, RatioSum
from .manifest import DatasetManifest, SplitManifest

SPLIT_NAMES = ("train", "validation", "test")
# Remainder ties go to the later evaluation splits first.
_TIE_ORDER = {"test": 0, "validation": 1, "train": 2}

DEFAULT_RATIOS = (0.70, 0.15, 0.15)


def largest_remainder(n: int, ratios: tuple[float, float, float]) -> dict[str, int]:
    """Apportion n items across train/validation/test by largest remainder."""
    floors = {}
    remainders = {}
    for name, r in zip(SPLIT_NAMES, ratios):
        exact = r * n
        floors[name] = math.floor(exact)
        remainders[name] = exact - math.floor(exact)
    leftover = n - sum(floors.values())
    order = sorted(SPLIT_NAMES, key=lambda s: (-remainders[s], _TIE_ORDER[s]))
    for name in order[:leftover]:
        floors[name] += 1
    return floors


def _class_rng(seed: int, class_name: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{class_name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def stratified_split(
    manifest: DatasetManifest,
    ratios: tuple[float, float, float] = DEFAULT_RATIOS,
    seed: int = 0,
) -> SplitManifest:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise RatioSum(f"ratios must be positive and sum to 1.0, got {ratios}")

    assignment: dict[str, str] = {}
    for label in manifest.class_set:
        ids = sorted(r.image_id for r in manifest.records if r.label == label and r.source == "real")
        if len(ids) < 3:
            raise ClassTooSmall(f"class {label.name!r} has {len(ids)} records, need >= 3")
        counts = largest_remainder(len(ids), ratios)
        rng = _class_rng(seed, label.name)
        order = [ids[i] for i in rng.permutation(len(ids))]
        cursor = 0
        for split_name in SPLIT_NAMES:
            for image_id in order[cursor : cursor + counts[split_name]]:
                assignment[image_id] = split_name
            cursor += counts[split_name]

    # Synthetic records never reach evaluation splits.
    for r in manifest.records:
        if r.source == "synthetic":
            assignment[r.image_id] = "train"

    return SplitManifest(assignment=assignment, ratios=tuple(ratios), seed=seed)
