"""Synthesis quotas and execution: top every class up to the majority count.

Quotas are computed from the training split only, and synthetic images
join only the training split, so evaluation data stays purely real.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatch, IoFailure, MissingCheckpoint
from .gan import GanCheckpoint, generate
from .manifest import (
    ClassDistribution,
    ClassLabel,
    DatasetManifest,
    ImageRecord,
    SplitManifest,
)
from .pixels import PixelArray, RangeTag, denormalize_from_gan, resize_image, save_png


@dataclass(frozen=True)
class SynthesisPlan:
    quotas: dict[ClassLabel, int]
    majority_count: int
    basis: ClassDistribution

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "majority_count": self.majority_count,
            "quotas": {c.name: q for c, q in sorted(self.quotas.items(), key=lambda kv: kv[0].name)},
        }


def plan_synthesis(dist: ClassDistribution) -> SynthesisPlan:
    majority = dist.counts[dist.majority_class]
    quotas = {c: majority - n for c, n in dist.counts.items()}
    return SynthesisPlan(quotas=quotas, majority_count=majority, basis=dist)


def save_plan(plan: SynthesisPlan, path):
    Path(path).write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True))


def synthesize_class(ckpt: GanCheckpoint, quota: int, seed: int, out_dir) -> list[ImageRecord]:
    """Generate `quota` classifier-ready 224x224 PNGs from one checkpoint."""
    if quota < 0:
        raise ValueError("quota must be non-negative")
    out_dir = Path(out_dir)
    if out_dir.name != ckpt.class_name:
        raise CheckpointMismatch(
            f"checkpoint is for class {ckpt.class_name!r} but out_dir is {out_dir.name!r}"
        )
    if quota == 0:
        return []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out_dir}: {exc}") from exc

    raw = generate(ckpt, quota, seed)  # quota x 128 x 128 x 3 in [-1, 1]
    records = []
    for n in range(quota):
        img = PixelArray(raw[n], RangeTag.SIGNED_M1_1)
        img = denormalize_from_gan(img)
        img = resize_image(img, (224, 224))
        name = f"{ckpt.ckpt_id}_{n}.png"
        save_png(img, out_dir / name)
        records.append(
            ImageRecord(
                image_id=f"{ckpt.ckpt_id}_{n}",
                relative_path=f"{out_dir.name}/{name}",
                label=ClassLabel(ckpt.class_name, -1),  # re-indexed by apply_plan
                source="synthetic",
                width_px=224,
                height_px=224,
                provenance={"checkpoint_id": ckpt.ckpt_id},
            )
        )
    return records


def apply_plan(
    manifest: DatasetManifest,
    split: SplitManifest,
    plan: SynthesisPlan,
    checkpoints: dict[str, GanCheckpoint],
    out_root,
    seed: int = 0,
) -> tuple[DatasetManifest, SplitManifest]:
    """Execute every positive quota; all-or-nothing.

    Returns an updated manifest (synthetic records appended, labels
    re-bound to the manifest's class set) and a split assigning every
    synthetic record to train. Validation/test are untouched.
    """
    missing = [c.name for c, q in plan.quotas.items() if q > 0 and c.name not in checkpoints]
    if missing:
        raise MissingCheckpoint(f"no checkpoint for class(es): {', '.join(sorted(missing))}")

    by_name = manifest.labels_by_name()
    out_root = Path(out_root)
    new_records: list[ImageRecord] = []
    for label, quota in sorted(plan.quotas.items(), key=lambda kv: kv[0].name):
        if quota <= 0:
            continue
        recs = synthesize_class(checkpoints[label.name], quota, seed, out_root / label.name)
        for r in recs:
            # Manifest paths resolve against image_root.
            abs_path = out_root / r.relative_path
            rel = os.path.relpath(abs_path, manifest.image_root) if manifest.image_root else str(abs_path)
            new_records.append(
                ImageRecord(
                    image_id=r.image_id,
                    relative_path=rel,
                    label=by_name[label.name],
                    source="synthetic",
                    width_px=r.width_px,
                    height_px=r.height_px,
                    provenance=r.provenance,
                )
            )

    new_manifest = DatasetManifest(
        records=manifest.records + tuple(new_records),
        class_set=manifest.class_set,
        created_at=manifest.created_at,
        seed=manifest.seed,
        image_root=manifest.image_root,
        skipped_rows=manifest.skipped_rows,
    )
    assignment = dict(split.assignment)
    for r in new_records:
        assignment[r.image_id] = "train"
    new_split = SplitManifest(assignment=assignment, ratios=split.ratios, seed=split.seed)
    return new_manifest, new_split
