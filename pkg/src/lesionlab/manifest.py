"""Dataset manifests: ingestion, class distribution, per-class layout.

The DatasetManifest is the contract between pipeline stages: an ordered
list of labeled image records plus the class set derived from them.
"""

from __future__ import annotations

import csv
import json
import shutil
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .errors import (
    ClassTooSmall,
    DuplicateId,
    EmptyManifest,
    IoFailure,
    MissingColumn,
)

MANIFEST_SCHEMA_VERSION = 1
REQUIRED_COLUMNS = ("image_id", "file_name", "diagnosis")
OPTIONAL_COLUMNS = ("age", "sex", "localization")


@dataclass(frozen=True, order=True)
class ClassLabel:
    name: str
    index: int


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    relative_path: str
    label: ClassLabel
    source: str = "real"  # "real" | "synthetic"
    width_px: int = 0
    height_px: int = 0
    provenance: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    class_set: tuple[ClassLabel, ...]
    created_at: str
    seed: int
    image_root: str = ""
    skipped_rows: tuple[dict, ...] = ()

    def labels_by_name(self) -> dict[str, ClassLabel]:
        return {c.name: c for c in self.class_set}

    def records_for(self, class_name: str) -> list[ImageRecord]:
        return [r for r in self.records if r.label.name == class_name]


@dataclass(frozen=True)
class ClassDistribution:
    counts: dict[ClassLabel, int]
    majority_class: ClassLabel
    imbalance_ratio: float


@dataclass(frozen=True)
class SplitManifest:
    assignment: dict[str, str]  # image_id -> "train" | "validation" | "test"
    ratios: tuple[float, float, float]
    seed: int


def make_class_set(names) -> tuple[ClassLabel, ...]:
    """Assign indices 0..K-1 by sorted name order."""
    return tuple(ClassLabel(name=n, index=i) for i, n in enumerate(sorted(set(names))))


def ingest_metadata(csv_path, image_root, seed: int = 0) -> DatasetManifest:
    """Build a manifest from a metadata CSV.

    Rows whose image file is missing or whose diagnosis is empty are not
    dropped silently: they are counted in ``skipped_rows`` with a reason.
    """
    csv_path = Path(csv_path)
    image_root = Path(image_root)
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise MissingColumn(f"metadata CSV lacks required column {col!r}")
        rows = list(reader)

    seen_ids = set()
    kept = []
    skipped = []
    for i, row in enumerate(rows):
        image_id = (row.get("image_id") or "").strip()
        file_name = (row.get("file_name") or "").strip()
        diagnosis = (row.get("diagnosis") or "").strip()
        if image_id in seen_ids:
            raise DuplicateId(f"duplicate image_id {image_id!r} in {csv_path}")
        seen_ids.add(image_id)
        if not diagnosis:
            skipped.append({"row": i, "image_id": image_id, "reason": "empty diagnosis"})
            continue
        path = image_root / file_name
        if not path.is_file():
            skipped.append({"row": i, "image_id": image_id, "reason": f"missing file {file_name}"})
            continue
        provenance = {k: row[k] for k in OPTIONAL_COLUMNS if row.get(k)}
        kept.append((image_id, file_name, diagnosis, provenance))

    if not kept:
        raise EmptyManifest(f"no valid rows in {csv_path} ({len(skipped)} skipped)")

    labels = make_class_set(d for _, _, d, _ in kept)
    by_name = {c.name: c for c in labels}
    records = tuple(
        ImageRecord(
            image_id=image_id,
            relative_path=file_name,
            label=by_name[diagnosis],
            source="real",
            provenance=provenance,
        )
        for image_id, file_name, diagnosis, provenance in kept
    )
    return DatasetManifest(
        records=records,
        class_set=labels,
        created_at=datetime.now(timezone.utc).isoformat(),
        seed=seed,
        image_root=str(image_root),
        skipped_rows=tuple(skipped),
    )


def compute_distribution(manifest: DatasetManifest, records=None) -> ClassDistribution:
    """Per-class counts, majority class (name tie-break) and max/min ratio."""
    if not manifest.records:
        raise EmptyManifest("cannot compute distribution of an empty manifest")
    records = manifest.records if records is None else records
    counts = {c: 0 for c in manifest.class_set}
    for r in records:
        counts[r.label] += 1
    top = max(counts.values())
    majority = min((c for c in counts if counts[c] == top), key=lambda c: c.name)
    nonzero = [n for n in counts.values() if n > 0]
    ratio = max(nonzero) / min(nonzero)
    return ClassDistribution(counts=counts, majority_class=majority, imbalance_ratio=ratio)


def organize_per_class(manifest: DatasetManifest, out_root) -> Path:
    """Copy each record's image into out_root/<class name>/. Idempotent."""
    out_root = Path(out_root)
    image_root = Path(manifest.image_root)
    for c in manifest.class_set:
        if not any(r.label == c for r in manifest.records):
            raise ClassTooSmall(f"class {c.name!r} has no records")
    try:
        for c in manifest.class_set:
            (out_root / c.name).mkdir(parents=True, exist_ok=True)
        for r in manifest.records:
            src = image_root / r.relative_path
            dst = out_root / r.label.name / Path(r.relative_path).name
            if not dst.exists():
                shutil.copyfile(src, dst)
    except OSError as exc:
        raise IoFailure(f"organize_per_class failed: {exc}") from exc
    return out_root


# --- JSON persistence (stable key ordering) ---

def manifest_to_dict(manifest: DatasetManifest) -> dict:
    return {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "created_at": manifest.created_at,
        "seed": manifest.seed,
        "image_root": manifest.image_root,
        "class_set": [c.name for c in manifest.class_set],
        "records": [
            {
                "image_id": r.image_id,
                "relative_path": r.relative_path,
                "label": r.label.name,
                "source": r.source,
                "width_px": r.width_px,
                "height_px": r.height_px,
                "provenance": r.provenance,
            }
            for r in manifest.records
        ],
        "skipped_rows": list(manifest.skipped_rows),
    }


def manifest_from_dict(doc: dict) -> DatasetManifest:
    labels = make_class_set(doc["class_set"])
    by_name = {c.name: c for c in labels}
    records = tuple(
        ImageRecord(
            image_id=r["image_id"],
            relative_path=r["relative_path"],
            label=by_name[r["label"]],
            source=r["source"],
            width_px=r["width_px"],
            height_px=r["height_px"],
            provenance=r.get("provenance", {}),
        )
        for r in doc["records"]
    )
    return DatasetManifest(
        records=records,
        class_set=labels,
        created_at=doc["created_at"],
        seed=doc["seed"],
        image_root=doc.get("image_root", ""),
        skipped_rows=tuple(doc.get("skipped_rows", [])),
    )


def save_manifest(manifest: DatasetManifest, path):
    Path(path).write_text(json.dumps(manifest_to_dict(manifest), indent=2, sort_keys=True))


def load_manifest(path) -> DatasetManifest:
    return manifest_from_dict(json.loads(Path(path).read_text()))


def split_to_dict(split: SplitManifest) -> dict:
    return {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "ratios": list(split.ratios),
        "seed": split.seed,
        "assignment": dict(sorted(split.assignment.items())),
    }


def split_from_dict(doc: dict) -> SplitManifest:
    return SplitManifest(
        assignment=dict(doc["assignment"]),
        ratios=tuple(doc["ratios"]),
        seed=doc["seed"],
    )


def save_split(split: SplitManifest, path):
    Path(path).write_text(json.dumps(split_to_dict(split), indent=2, sort_keys=True))


def load_split(path) -> SplitManifest:
    return split_from_dict(json.loads(Path(path).read_text()))
