"""Pixel-level transforms: the two resize/normalize pipelines.

Images are carried as float32 HxWx3 RGB arrays tagged with the numeric
range they currently live in, so a mis-ordered pipeline fails loudly
instead of silently double-normalizing.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import cv2
import numpy as np
from PIL import Image

from .errors import BadTarget, IoFailure, RangeTagMismatch

# Channel statistics published with ImageNet-pretrained backbones.
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class RangeTag(enum.Enum):
    BYTE_0_255 = "byte_0_255"
    UNIT_0_1 = "unit_0_1"
    SIGNED_M1_1 = "signed_m1_1"
    BACKBONE_NORMALIZED = "backbone_normalized"


@dataclass(frozen=True)
class PixelArray:
    """RGB image payload with an explicit value-range tag."""

    values: np.ndarray  # HxWx3 float32
    range_tag: RangeTag

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or v.shape[2] != 3:
            raise ShapeError(f"expected HxWx3 RGB array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite pixel values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


class ShapeError(ValueError):
    pass


def _require_tag(img: PixelArray, *tags: RangeTag):
    if img.range_tag not in tags:
        raise RangeTagMismatch(
            f"expected range tag in {[t.value for t in tags]}, got {img.range_tag.value}"
        )


def resize_image(img: PixelArray, target: tuple[int, int]) -> PixelArray:
    """Bilinear resize to (height, width); range tag is preserved."""
    h, w = target
    if h <= 0 or w <= 0:
        raise BadTarget(f"non-positive target dimensions {target}")
    _require_tag(img, RangeTag.BYTE_0_255, RangeTag.UNIT_0_1)
    if (img.height, img.width) == (h, w):
        return PixelArray(img.values.copy(), img.range_tag)
    out = cv2.resize(img.values, (w, h), interpolation=cv2.INTER_LINEAR)
    return PixelArray(out.astype(np.float32), img.range_tag)


def normalize_for_gan(img: PixelArray) -> PixelArray:
    """Map bytes to [-1, 1] to match a tanh generator output."""
    _require_tag(img, RangeTag.BYTE_0_255)
    out = (img.values / 255.0 - 0.5) / 0.5
    return PixelArray(out.astype(np.float32), RangeTag.SIGNED_M1_1)


def denormalize_from_gan(img: PixelArray) -> PixelArray:
    """Map generator output in [-1, 1] back to [0, 1]."""
    _require_tag(img, RangeTag.SIGNED_M1_1)
    out = (img.values + 1.0) / 2.0
    return PixelArray(out.astype(np.float32), RangeTag.UNIT_0_1)


def normalize_for_classifier(img: PixelArray) -> PixelArray:
    """Apply per-channel ImageNet statistics to a [0, 1] image."""
    _require_tag(img, RangeTag.UNIT_0_1)
    out = (img.values - IMAGENET_MEAN) / IMAGENET_STD
    return PixelArray(out.astype(np.float32), RangeTag.BACKBONE_NORMALIZED)


def to_unit(img: PixelArray) -> PixelArray:
    """Map a byte-range image to [0, 1]."""
    _require_tag(img, RangeTag.BYTE_0_255)
    return PixelArray((img.values / 255.0).astype(np.float32), RangeTag.UNIT_0_1)


def load_image(path) -> PixelArray:
    """Read a PNG/JPEG file as a byte-range RGB PixelArray."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except OSError as exc:
        raise IoFailure(f"cannot read image {path}: {exc}") from exc
    return PixelArray(arr, RangeTag.BYTE_0_255)


def save_png(img: PixelArray, path):
    """Write a byte-range or [0, 1] image as PNG."""
    _require_tag(img, RangeTag.BYTE_0_255, RangeTag.UNIT_0_1)
    v = img.values
    if img.range_tag is RangeTag.UNIT_0_1:
        v = v * 255.0
    byte = np.clip(np.rint(v), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(byte, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise IoFailure(f"cannot write image {path}: {exc}") from exc
