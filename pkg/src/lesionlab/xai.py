"""Model-agnostic explanations over superpixels.

Both explainers see the model only as a batch prediction function
(images in, probability rows out). Masked-out segments are filled with
the image's per-channel mean color.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from math import factorial
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import BadTarget, IoFailure, ModelCallFailure
from .pixels import PixelArray, RangeTag, save_png

MODEL_BATCH = 128


@dataclass(frozen=True)
class SuperpixelMap:
    labels: np.ndarray  # H x W ints in 0..S-1
    segment_count: int


@dataclass(frozen=True)
class LimeConfig:
    n_samples: int = 1000
    top_k: int = 5
    kernel_sigma: float = 0.25
    ridge_lambda: float = 1.0
    seed: int = 0
    exhaustive: bool = False


@dataclass(frozen=True)
class ShapConfig:
    n_permutations: int = 200
    seed: int = 0
    exact_max_segments: int = 12


@dataclass
class LimeExplanation:
    class_explained: int
    segment_weights: np.ndarray
    intercept: float
    fit_r2: float
    top_segments: list[int]
    singular_fallback: bool = False
    seed: int = 0


@dataclass
class ShapExplanation:
    class_explained: int
    segment_attributions: np.ndarray
    baseline_value: float
    prediction_value: float
    exact: bool = False
    seed: int = 0


# --- SLIC-style segmentation ---

def segment_superpixels(img: PixelArray, target_segments: int, seed: int = 0,
                        iterations: int = 10, compactness: float = 0.2) -> SuperpixelMap:
    """Cluster pixels in color+position space from a regular grid init.

    On a constant image the color term vanishes and the result is the
    Voronoi partition of the grid, i.e. near-equal rectangles.
    """
    if target_segments < 1:
        raise BadTarget(f"target_segments must be >= 1, got {target_segments}")
    if img.range_tag is not RangeTag.UNIT_0_1:
        raise BadTarget("segmentation expects a [0, 1] image")
    h, w = img.height, img.width
    color = img.values

    ny = max(1, int(round(np.sqrt(target_segments * h / w))))
    nx = max(1, int(round(target_segments / ny)))
    ys = (np.arange(ny) + 0.5) * h / ny
    xs = (np.arange(nx) + 0.5) * w / nx
    step = max(1, int(round(max(h / ny, w / nx))))
    centers = np.array([(y, x) for y in ys for x in xs], dtype=np.float64)
    center_colors = color[centers[:, 0].astype(int), centers[:, 1].astype(int)].astype(np.float64)

    yy, xx = np.mgrid[0:h, 0:w]
    labels = np.zeros((h, w), dtype=np.int64)
    dist = np.full((h, w), np.inf)
    spatial_scale = compactness / step

    rng = np.random.default_rng(seed)  # reserved for tie perturbation below
    jitter = rng.uniform(0, 1e-9, size=len(centers))

    for _ in range(iterations):
        dist.fill(np.inf)
        for k, (cy, cx) in enumerate(centers):
            y0, y1 = max(0, int(cy) - step), min(h, int(cy) + step + 1)
            x0, x1 = max(0, int(cx) - step), min(w, int(cx) + step + 1)
            dc = np.sum((color[y0:y1, x0:x1] - center_colors[k]) ** 2, axis=-1)
            ds = ((yy[y0:y1, x0:x1] - cy) ** 2 + (xx[y0:y1, x0:x1] - cx) ** 2) * spatial_scale**2
            d = dc + ds + jitter[k]
            window = dist[y0:y1, x0:x1]
            better = d < window
            window[better] = d[better]
            labels[y0:y1, x0:x1][better] = k
        # Update centers to cluster means.
        for k in range(len(centers)):
            mask = labels == k
            if mask.any():
                centers[k] = (yy[mask].mean(), xx[mask].mean())
                center_colors[k] = color[mask].mean(axis=0)

    return _enforce_connectivity(labels, step)


def _enforce_connectivity(labels: np.ndarray, step: int) -> SuperpixelMap:
    """4-connected components; fragments below a quarter cell merge into a neighbor."""
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    out = np.full(labels.shape, -1, dtype=np.int64)
    min_size = max(1, (step * step) // 4)
    next_label = 0
    components = []
    for k in np.unique(labels):
        comp, n = ndimage.label(labels == k, structure=structure)
        for c in range(1, n + 1):
            components.append(comp == c)
    # Large components get labels first so orphans can attach to them.
    components.sort(key=lambda m: -int(m.sum()))
    small = []
    for mask in components:
        if int(mask.sum()) >= min_size or next_label == 0:
            out[mask] = next_label
            next_label += 1
        else:
            small.append(mask)
    for mask in small:
        ring = ndimage.binary_dilation(mask, structure=structure) & ~mask
        neighbors = out[ring]
        neighbors = neighbors[neighbors >= 0]
        target = np.bincount(neighbors).argmax() if len(neighbors) else 0
        out[mask] = target
    # Relabel contiguously.
    uniq = np.unique(out)
    remap = {int(u): i for i, u in enumerate(uniq)}
    final = np.vectorize(remap.get)(out)
    return SuperpixelMap(labels=final.astype(np.int64), segment_count=len(uniq))


# --- shared perturbation machinery ---

def _call_model(model, batch: np.ndarray) -> np.ndarray:
    try:
        out = np.asarray(model(batch))
    except Exception as exc:
        raise ModelCallFailure(f"model call failed: {exc}") from exc
    if out.ndim != 2 or out.shape[0] != batch.shape[0]:
        raise ModelCallFailure(f"model returned shape {out.shape} for batch of {batch.shape[0]}")
    return out


def _masked_batch(img: np.ndarray, segmentation: SuperpixelMap, masks: np.ndarray,
                  baseline: np.ndarray) -> np.ndarray:
    # masks: n x S binary. Broadcast each segment's keep/drop bit to pixels.
    keep = masks[:, segmentation.labels]  # n x H x W
    return np.where(keep[..., None].astype(bool), img[None], baseline[None])


def _predict_masked(model, img: np.ndarray, segmentation: SuperpixelMap,
                    masks: np.ndarray, class_index: int, baseline: np.ndarray) -> np.ndarray:
    values = np.empty(len(masks))
    for start in range(0, len(masks), MODEL_BATCH):
        chunk = masks[start : start + MODEL_BATCH]
        batch = _masked_batch(img, segmentation, chunk, baseline)
        values[start : start + len(chunk)] = _call_model(model, batch)[:, class_index]
    return values


def _mean_baseline(img: np.ndarray) -> np.ndarray:
    return img.reshape(-1, img.shape[-1]).mean(axis=0)


# --- LIME ---

def _kernel_weights(masks: np.ndarray, sigma: float) -> np.ndarray:
    s = masks.shape[1]
    ones = masks.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(ones > 0, ones / (np.sqrt(ones) * np.sqrt(s)), 0.0)
    d = 1.0 - cos
    return np.exp(-(d**2) / sigma**2)


def lime_explain(model, img: PixelArray, class_index: int,
                 segmentation: SuperpixelMap, config: LimeConfig = LimeConfig()) -> LimeExplanation:
    """Weighted ridge surrogate over random segment masks."""
    from sklearn.linear_model import Ridge
    from sklearn.metrics import r2_score

    s = segmentation.segment_count
    rng = np.random.default_rng(config.seed)
    if config.exhaustive:
        masks = ((np.arange(2**s)[:, None] >> np.arange(s)) & 1).astype(np.float64)
    else:
        masks = (rng.random((config.n_samples, s)) < 0.5).astype(np.float64)
        masks[0] = 1.0  # the unperturbed image is always in the sample
    weights = _kernel_weights(masks, config.kernel_sigma)
    baseline = _mean_baseline(img.values)
    y = _predict_masked(model, img.values, segmentation, masks, class_index, baseline)

    lam = config.ridge_lambda
    singular = False
    for attempt in range(3):
        ridge = Ridge(alpha=lam)
        ridge.fit(masks, y, sample_weight=weights)
        if np.all(np.isfinite(ridge.coef_)) and np.isfinite(ridge.intercept_):
            break
        singular = True
        lam *= 100.0
    coef = ridge.coef_
    r2 = float(r2_score(y, ridge.predict(masks), sample_weight=weights))

    positive = [int(i) for i in np.argsort(-coef) if coef[i] > 1e-9]
    return LimeExplanation(
        class_explained=class_index,
        segment_weights=coef.copy(),
        intercept=float(ridge.intercept_),
        fit_r2=r2,
        top_segments=positive[: config.top_k],
        singular_fallback=singular,
        seed=config.seed,
    )


# --- SHAP ---

def _exact_shapley(values: np.ndarray, s: int) -> np.ndarray:
    """Shapley values from the full 2^s table of coalition values."""
    phi = np.zeros(s)
    coeffs = [factorial(t) * factorial(s - 1 - t) / factorial(s) for t in range(s)]
    sizes = np.array([bin(m).count("1") for m in range(2**s)])
    for i in range(s):
        bit = 1 << i
        without = np.array([m for m in range(2**s) if not m & bit])
        phi[i] = np.sum(
            [coeffs[sizes[m]] * (values[m | bit] - values[m]) for m in without]
        )
    return phi


def shap_explain(model, img: PixelArray, class_index: int,
                 segmentation: SuperpixelMap, config: ShapConfig = ShapConfig()) -> ShapExplanation:
    """Segment-level Shapley values.

    Exact enumeration over all 2^S coalitions when S is small enough,
    permutation sampling of marginal contributions otherwise.
    """
    s = segmentation.segment_count
    baseline = _mean_baseline(img.values)
    exact = s <= config.exact_max_segments

    if exact:
        masks = ((np.arange(2**s)[:, None] >> np.arange(s)) & 1).astype(np.float64)
        values = _predict_masked(model, img.values, segmentation, masks, class_index, baseline)
        phi = _exact_shapley(values, s)
        baseline_value = float(values[0])
        prediction_value = float(values[-1])
    else:
        rng = np.random.default_rng(config.seed)
        phi = np.zeros(s)
        # Every permutation needs S+1 prefix evaluations, batched together.
        for _ in range(config.n_permutations):
            perm = rng.permutation(s)
            prefix_masks = np.zeros((s + 1, s))
            for step, seg in enumerate(perm, start=1):
                prefix_masks[step] = prefix_masks[step - 1]
                prefix_masks[step, seg] = 1.0
            vals = _predict_masked(model, img.values, segmentation, prefix_masks, class_index, baseline)
            phi[perm] += np.diff(vals)
        phi /= config.n_permutations
        endpoint_masks = np.stack([np.zeros(s), np.ones(s)])
        endpoints = _predict_masked(model, img.values, segmentation, endpoint_masks, class_index, baseline)
        baseline_value = float(endpoints[0])
        prediction_value = float(endpoints[1])

    return ShapExplanation(
        class_explained=class_index,
        segment_attributions=phi,
        baseline_value=baseline_value,
        prediction_value=prediction_value,
        exact=exact,
        seed=config.seed,
    )


# --- rendering ---

def _to_unit(img: PixelArray) -> np.ndarray:
    if img.range_tag is RangeTag.UNIT_0_1:
        return img.values
    if img.range_tag is RangeTag.BYTE_0_255:
        return img.values / 255.0
    raise BadTarget(f"cannot render images tagged {img.range_tag}")


def render_lime_overlay(img: PixelArray, explanation: LimeExplanation,
                        segmentation: SuperpixelMap, out_path) -> Path:
    """Original image with a 2-pixel yellow contour around the top segments."""
    base = _to_unit(img).copy()
    if not explanation.top_segments:
        warnings.warn("empty top_segments; emitting the unmodified image")
    else:
        union = np.isin(segmentation.labels, explanation.top_segments)
        structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
        inner = union & ~ndimage.binary_erosion(union, structure=structure, border_value=1)
        contour = ndimage.binary_dilation(inner, structure=np.ones((2, 2)))
        base[contour] = np.array([1.0, 1.0, 0.0])
    save_png(PixelArray(base.astype(np.float32), RangeTag.UNIT_0_1), out_path)
    return Path(out_path)


def render_shap_heatmap(img: PixelArray, explanation: ShapExplanation,
                        segmentation: SuperpixelMap, out_path) -> Path:
    """Diverging red/blue overlay, alpha 0.5, symmetric scale anchored at 0."""
    base = _to_unit(img).copy()
    phi = explanation.segment_attributions
    peak = float(np.max(np.abs(phi)))
    if peak > 0:
        strength = (phi / peak)[segmentation.labels]  # H x W in [-1, 1]
        tint = np.zeros(base.shape, dtype=np.float64)
        tint[..., 0] = np.clip(strength, 0, 1)  # red for positive influence
        tint[..., 2] = np.clip(-strength, 0, 1)  # blue for negative
        alpha = 0.5 * np.abs(strength)[..., None]
        base = base * (1 - alpha) + tint * alpha
    save_png(PixelArray(base.astype(np.float32), RangeTag.UNIT_0_1), out_path)
    return Path(out_path)


def explanation_to_dict(explanation, image_id: str) -> dict:
    if isinstance(explanation, LimeExplanation):
        return {
            "image_id": image_id,
            "method": "lime",
            "class_explained": explanation.class_explained,
            "segment_count": len(explanation.segment_weights),
            "values": [float(v) for v in explanation.segment_weights],
            "intercept": explanation.intercept,
            "fit_r2": explanation.fit_r2,
            "seed": explanation.seed,
        }
    return {
        "image_id": image_id,
        "method": "shap",
        "class_explained": explanation.class_explained,
        "segment_count": len(explanation.segment_attributions),
        "values": [float(v) for v in explanation.segment_attributions],
        "baseline_value": explanation.baseline_value,
        "seed": explanation.seed,
    }


def save_explanation(explanation, image_id: str, path):
    try:
        Path(path).write_text(json.dumps(explanation_to_dict(explanation, image_id), indent=2, sort_keys=True))
    except OSError as exc:
        raise IoFailure(f"cannot write explanation {path}: {exc}") from exc
