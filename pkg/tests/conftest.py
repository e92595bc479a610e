import csv
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from lesionlab.manifest import DatasetManifest, ImageRecord, make_class_set
from lesionlab.pixels import PixelArray, RangeTag
from lesionlab.xai import SuperpixelMap

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


def make_manifest(class_counts: dict[str, int], image_root="", seed=0) -> DatasetManifest:
    """In-memory manifest with the given per-class counts (no files)."""
    labels = make_class_set(class_counts)
    by_name = {c.name: c for c in labels}
    records = []
    for name, count in class_counts.items():
        for j in range(count):
            records.append(
                ImageRecord(
                    image_id=f"{name}_{j:04d}",
                    relative_path=f"{name}_{j:04d}.png",
                    label=by_name[name],
                )
            )
    return DatasetManifest(
        records=tuple(records),
        class_set=labels,
        created_at="2000-01-01T00:00:00+00:00",
        seed=seed,
        image_root=str(image_root),
    )


def write_csv_dataset(root: Path, rows, create_files=True):
    """Metadata CSV plus (optionally) dummy image files for ingestion tests."""
    from PIL import Image

    root.mkdir(parents=True, exist_ok=True)
    csv_path = root / "metadata.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "file_name", "diagnosis"])
        for image_id, file_name, diagnosis in rows:
            writer.writerow([image_id, file_name, diagnosis])
            if create_files:
                Image.new("RGB", (8, 6), (100, 50, 20)).save(root / file_name)
    return csv_path


def striped_segmentation(h: int, w: int, segments: int) -> SuperpixelMap:
    """Vertical stripes: a known segmentation for planted-model tests."""
    labels = np.minimum((np.arange(w) * segments) // w, segments - 1)
    return SuperpixelMap(labels=np.broadcast_to(labels, (h, w)).copy(), segment_count=segments)


def striped_image(seg: SuperpixelMap) -> PixelArray:
    """One distinct constant color per stripe."""
    colors = np.linspace(0.1, 0.9, seg.segment_count)
    vals = colors[seg.labels][..., None].repeat(3, axis=2).astype(np.float32)
    return PixelArray(vals, RangeTag.UNIT_0_1)


def presence_detector(seg: SuperpixelMap, img: PixelArray):
    """Return a function mapping perturbed batches to S presence bits.

    A segment counts as present when its pixels still carry the original
    color rather than the mean-fill baseline.
    """
    colors = np.array([img.values[seg.labels == k].mean(axis=0) for k in range(seg.segment_count)])

    def detect(batch: np.ndarray) -> np.ndarray:
        out = np.zeros((batch.shape[0], seg.segment_count))
        for k in range(seg.segment_count):
            seg_mean = batch[:, seg.labels == k, :].mean(axis=1)
            out[:, k] = np.all(np.abs(seg_mean - colors[k]) < 1e-4, axis=1)
        return out

    return detect


def mask_model(seg, img, fn):
    """Wrap a mask->score function as a batch image model with 2 outputs."""
    detect = presence_detector(seg, img)

    def model(batch):
        y = fn(detect(batch))
        return np.stack([y, 1 - y], axis=1)

    return model


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    """Small generated toy dataset shared across tests."""
    from lesionlab.toydata import generate_toy_dataset

    root = tmp_path_factory.mktemp("toy")
    manifest = generate_toy_dataset(root, classes=3, per_class_counts=[20, 8, 8], seed=7)
    return root, manifest
