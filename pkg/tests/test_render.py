import numpy as np
import pytest

from conftest import striped_segmentation
from lesionlab.pixels import PixelArray, RangeTag, load_image
from lesionlab.xai import (
    LimeExplanation,
    ShapExplanation,
    render_lime_overlay,
    render_shap_heatmap,
    save_explanation,
)


def gray_image(h=32, w=32, value=0.5):
    return PixelArray(np.full((h, w, 3), value, dtype=np.float32), RangeTag.UNIT_0_1)


def lime_exp(weights, top):
    return LimeExplanation(
        class_explained=0, segment_weights=np.asarray(weights, dtype=float),
        intercept=0.0, fit_r2=1.0, top_segments=list(top),
    )


def shap_exp(phi):
    phi = np.asarray(phi, dtype=float)
    return ShapExplanation(
        class_explained=0, segment_attributions=phi,
        baseline_value=0.0, prediction_value=float(phi.sum()), exact=True,
    )


def test_lime_overlay_dimensions_and_contour(tmp_path):
    seg = striped_segmentation(32, 32, 4)
    img = gray_image()
    out = render_lime_overlay(img, lime_exp([1, 0, 0, 0], [0]), seg, tmp_path / "o.png")
    rendered = load_image(out).values
    assert rendered.shape == (32, 32, 3)
    yellow = (rendered[..., 0] == 255) & (rendered[..., 1] == 255) & (rendered[..., 2] == 0)
    assert yellow.any()
    # contour pixels lie only on the boundary of segment 0 (stripe cols 0-7):
    # within one dilation step of the segment edge, never in its interior
    ys, xs = np.where(yellow)
    assert xs.max() <= 8  # stripe boundary column is 7; 2px band may touch 8
    interior = yellow[2:-2, 2:6]
    assert not interior.any()


def test_lime_overlay_empty_top_segments_warns(tmp_path):
    seg = striped_segmentation(16, 16, 2)
    img = gray_image(16, 16)
    with pytest.warns(UserWarning):
        out = render_lime_overlay(img, lime_exp([0, 0], []), seg, tmp_path / "o.png")
    rendered = load_image(out).values / 255.0
    assert np.allclose(rendered, img.values, atol=1 / 255)


def test_shap_all_positive_has_no_blue_dominance(tmp_path):
    seg = striped_segmentation(24, 24, 3)
    img = gray_image(24, 24)
    out = render_shap_heatmap(img, shap_exp([0.5, 0.2, 0.9]), seg, tmp_path / "h.png")
    rendered = load_image(out).values
    assert rendered.shape == (24, 24, 3)
    assert not np.any(rendered[..., 2] > rendered[..., 0])
    assert np.any(rendered[..., 0] > rendered[..., 2])


def test_shap_zero_attribution_untinted(tmp_path):
    seg = striped_segmentation(24, 24, 3)
    img = gray_image(24, 24)
    out = render_shap_heatmap(img, shap_exp([0.0, 1.0, 0.0]), seg, tmp_path / "h.png")
    rendered = load_image(out).values / 255.0
    untinted = seg.labels != 1
    assert np.allclose(rendered[untinted], img.values[untinted], atol=1 / 255)


def test_shap_sign_flip_swaps_red_blue(tmp_path):
    seg = striped_segmentation(24, 24, 4)
    img = gray_image(24, 24)
    phi = [0.8, -0.3, 0.1, -0.9]
    a = load_image(render_shap_heatmap(img, shap_exp(phi), seg, tmp_path / "a.png")).values
    b = load_image(render_shap_heatmap(img, shap_exp([-v for v in phi]), seg, tmp_path / "b.png")).values
    assert np.array_equal(a[..., 0], b[..., 2])
    assert np.array_equal(a[..., 2], b[..., 0])
    assert np.array_equal(a[..., 1], b[..., 1])


def test_explanation_json(tmp_path):
    path = tmp_path / "e.json"
    save_explanation(lime_exp([1.0, -0.5], [0]), "img1", path)
    import json

    doc = json.loads(path.read_text())
    assert doc["method"] == "lime"
    assert doc["image_id"] == "img1"
    assert doc["segment_count"] == 2
    save_explanation(shap_exp([0.1, 0.2]), "img1", path)
    doc = json.loads(path.read_text())
    assert doc["method"] == "shap"
    assert "baseline_value" in doc
