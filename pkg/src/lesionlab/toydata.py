"""Seed-deterministic toy dataset generator.

Produces desk-scale stand-in images: a skin-toned background with one
central blob whose hue band, eccentricity, border irregularity, and
texture frequency encode the class. The blob region doubles as ground
truth for checking explanation overlays.
"""

from __future__ import annotations

import csv
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import IoFailure
from .manifest import DatasetManifest, ImageRecord, make_class_set
from .pixels import PixelArray, RangeTag, save_png

TOY_WIDTH = 600
TOY_HEIGHT = 450


def class_name(index: int) -> str:
    return f"class_{index:02d}"


def _class_params(index: int) -> dict:
    # Hue spacing keeps classes linearly separable; the rest adds shape variety.
    return {
        "hue": (0.02 + 0.13 * index) % 1.0,
        "eccentricity": 0.3 + 0.08 * (index % 5),
        "border_wobble": 0.05 + 0.04 * (index % 4),
        "texture_freq": 2.0 + 1.5 * (index % 3),
    }


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def render_toy_image(class_index: int, rng: np.random.Generator,
                     height: int = TOY_HEIGHT, width: int = TOY_WIDTH) -> np.ndarray:
    """One toy image as a float32 HxWx3 array in [0, 255]."""
    params = _class_params(class_index)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float32)
    cy = height / 2 + rng.uniform(-height * 0.05, height * 0.05)
    cx = width / 2 + rng.uniform(-width * 0.05, width * 0.05)
    theta = np.arctan2(yy - cy, xx - cx)
    r = np.hypot((yy - cy) / (height * 0.28), (xx - cx) / (width * 0.28 * (1 - params["eccentricity"])))

    # Irregular border: radius modulated by a few random harmonics.
    wobble = np.zeros_like(theta)
    for k in range(2, 6):
        wobble += rng.uniform(-1, 1) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    boundary = 1.0 + params["border_wobble"] * wobble
    inside = (r < boundary).astype(np.float32)

    # Skin-toned background with mild noise.
    img = np.empty((height, width, 3), dtype=np.float32)
    img[..., 0] = 0.86
    img[..., 1] = 0.70
    img[..., 2] = 0.60
    img += rng.normal(0, 0.015, size=(height, width, 3)).astype(np.float32)

    # Blob color from the class hue band plus class-frequency texture.
    texture = 0.08 * np.sin(params["texture_freq"] * 2 * np.pi * xx / width) * np.sin(
        params["texture_freq"] * 2 * np.pi * yy / height
    )
    hue = np.full((height, width), params["hue"], dtype=np.float32)
    sat = np.clip(0.75 + texture + rng.normal(0, 0.02, size=(height, width)), 0, 1).astype(np.float32)
    val = np.clip(0.45 + texture, 0, 1).astype(np.float32)
    blob = _hsv_to_rgb(hue, sat, val)

    mask = inside[..., None]
    out = img * (1 - mask) + blob * mask
    return np.clip(out * 255.0, 0, 255).astype(np.float32)


def generate_toy_dataset(out_root, classes: int, per_class_counts: list[int],
                         seed: int = 0) -> DatasetManifest:
    """Write toy images plus a metadata CSV in the ingestion format."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if len(per_class_counts) != classes or any(n <= 0 for n in per_class_counts):
        raise ValueError("per_class_counts must list one positive count per class")
    out_root = Path(out_root)
    try:
        images_dir = out_root / "images"
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out_root}: {exc}") from exc

    names = [class_name(i) for i in range(classes)]
    labels = make_class_set(names)
    by_name = {c.name: c for c in labels}

    rows = []
    records = []
    for ci, count in enumerate(per_class_counts):
        for j in range(count):
            rng = np.random.default_rng([seed, ci, j])
            arr = render_toy_image(ci, rng)
            image_id = f"toy_{ci:02d}_{j:04d}"
            file_name = f"images/{image_id}.png"
            save_png(PixelArray(arr, RangeTag.BYTE_0_255), out_root / file_name)
            rows.append((image_id, file_name, names[ci]))
            records.append(
                ImageRecord(
                    image_id=image_id,
                    relative_path=file_name,
                    label=by_name[names[ci]],
                    source="real",
                    width_px=TOY_WIDTH,
                    height_px=TOY_HEIGHT,
                )
            )

    csv_path = out_root / "metadata.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "file_name", "diagnosis"])
        writer.writerows(rows)

    return DatasetManifest(
        records=tuple(records),
        class_set=labels,
        created_at=datetime.now(timezone.utc).isoformat(),
        seed=seed,
        image_root=str(out_root),
    )
