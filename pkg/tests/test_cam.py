import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cimx.cam import (
    BBox,
    bbox_for_image,
    cam_from_features,
    compute_cam,
    mask_to_bbox,
    threshold_mask,
)
from cimx.errors import EmptyMaskError
from cimx.model import Branch, ModelSpec, build_model

TINY_SPEC = ModelSpec(in_channels=3, channels=(8, 16), block_depth=1, image_size=16, norm_groups=4)


def weighted_sum_oracle(features, weight):
    """Brute-force channel-weighted sum, then min-max normalize."""
    C, h, w = features.shape
    raw = np.zeros((h, w))
    for c in range(C):
        for i in range(h):
            for j in range(w):
                raw[i, j] += weight[c] * features[c, i, j]
    lo, hi = raw.min(), raw.max()
    return (raw - lo) / (hi - lo)


def test_cam_single_channel():
    values, degenerate = cam_from_features(np.array([[[1.0, 2.0], [3.0, 4.0]]]), np.array([1.0]))
    assert not degenerate
    np.testing.assert_allclose(values, [[0.0, 1 / 3], [2 / 3, 1.0]])


def test_cam_scaling_cancels():
    feats = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    v1, _ = cam_from_features(feats, np.array([1.0]))
    v2, _ = cam_from_features(feats, np.array([2.0]))
    np.testing.assert_allclose(v1, v2)


def test_cam_two_channels_matches_oracle():
    feats = np.array([[[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 1.0]]])
    weight = np.array([1.0, 3.0])
    values, _ = cam_from_features(feats, weight)
    np.testing.assert_allclose(values, [[1 / 3, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(values, weighted_sum_oracle(feats, weight))


def test_cam_degenerate_constant():
    values, degenerate = cam_from_features(np.ones((2, 3, 3)), np.array([1.0, -1.0]))
    assert degenerate
    np.testing.assert_array_equal(values, np.zeros((3, 3)))


def test_threshold_examples():
    cam = np.array([[0.0, 1 / 3], [2 / 3, 1.0]])
    np.testing.assert_array_equal(threshold_mask(cam, 0.6).values, [[False, False], [True, True]])
    np.testing.assert_array_equal(threshold_mask(cam, 0.999).values, [[False, False], [False, True]])
    just_below_min_positive = 1 / 3 - 1e-9
    np.testing.assert_array_equal(
        threshold_mask(cam, just_below_min_positive).values, [[False, True], [True, True]]
    )


def test_threshold_is_strict():
    cam = np.array([[0.6, 0.6000001]])
    np.testing.assert_array_equal(threshold_mask(cam, 0.6).values, [[False, True]])


def test_threshold_empty_flag():
    assert threshold_mask(np.array([[0.1, 0.2]]), 0.5).empty
    assert not threshold_mask(np.array([[0.1, 0.9]]), 0.5).empty


@settings(max_examples=200, deadline=None)
@given(
    cam=hnp.arrays(np.float64, (6, 7), elements=st.floats(0, 1)),
    t1=st.floats(0.01, 0.98),
    t2=st.floats(0.01, 0.98),
)
def test_threshold_monotone(cam, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    m_hi = threshold_mask(cam, hi).values
    m_lo = threshold_mask(cam, lo).values
    assert not np.any(m_hi & ~m_lo)


def test_bbox_full_mask():
    assert mask_to_bbox(np.ones((4, 6), dtype=bool)) == BBox(0, 0, 3, 5)


def test_bbox_singleton():
    mask = np.zeros((5, 5), dtype=bool)
    mask[2, 3] = True
    assert mask_to_bbox(mask) == BBox(2, 3, 2, 3)


def test_bbox_two_pixels():
    mask = np.zeros((8, 8), dtype=bool)
    mask[1, 5] = True
    mask[4, 2] = True
    box = mask_to_bbox(mask)
    assert (box.h_min, box.w_min, box.h_max, box.w_max) == (1, 2, 4, 5)


def test_bbox_empty_raises():
    with pytest.raises(EmptyMaskError):
        mask_to_bbox(np.zeros((3, 3), dtype=bool))


def test_bbox_idempotent(rng):
    for _ in range(50):
        mask = rng.random((10, 12)) < 0.1
        if not mask.any():
            continue
        box = mask_to_bbox(mask)
        interior = np.zeros_like(mask)
        interior[box.slices] = True
        assert mask_to_bbox(interior) == box


def test_bbox_monotone_in_threshold(rng):
    for _ in range(50):
        cam = rng.random((12, 12))
        m1 = threshold_mask(cam, 0.3)
        m2 = threshold_mask(cam, 0.7)
        if m2.empty or m1.empty:
            continue
        assert mask_to_bbox(m1).contains(mask_to_bbox(m2))


def test_compute_cam_shape_and_range():
    state = build_model(TINY_SPEC, classes=3, seed=0)
    img = np.random.default_rng(1).random((16, 16, 3)).astype(np.float32)
    cam = compute_cam(img, 1, state, Branch.RELU)
    assert cam.values.shape == (16, 16)
    assert cam.values.min() >= 0.0 and cam.values.max() <= 1.0
    assert not cam.degenerate


def test_compute_cam_scale_invariant():
    state = build_model(TINY_SPEC, classes=3, seed=0)
    img = np.random.default_rng(2).random((16, 16, 3)).astype(np.float32)
    before = compute_cam(img, 0, state, Branch.RELU).values
    with torch.no_grad():
        state.net.classifier.weight[0] *= 7.3
    after = compute_cam(img, 0, state, Branch.RELU).values
    np.testing.assert_allclose(after, before, atol=1e-6)


def test_compute_cam_cim_branch_differs():
    state = build_model(TINY_SPEC, classes=3, seed=0)
    img = np.random.default_rng(3).random((16, 16, 3)).astype(np.float32)
    relu_map = compute_cam(img, 0, state, Branch.RELU).values
    cim_map = compute_cam(img, 0, state, Branch.CIM).values
    assert relu_map.shape == cim_map.shape
    # the rational units start as a ReLU fit, so the maps are close but not equal
    assert not np.array_equal(relu_map, cim_map)


def test_compute_cam_degenerate_zero_weight():
    state = build_model(TINY_SPEC, classes=3, seed=0)
    with torch.no_grad():
        state.net.classifier.weight[2].zero_()
    img = np.random.default_rng(4).random((16, 16, 3)).astype(np.float32)
    cam = compute_cam(img, 2, state, Branch.RELU)
    assert cam.degenerate
    np.testing.assert_array_equal(cam.values, 0.0)
    assert bbox_for_image(img, 2, state, Branch.RELU, 0.6) == BBox.full(16, 16)


def test_compute_cam_label_out_of_range():
    state = build_model(TINY_SPEC, classes=3, seed=0)
    img = np.zeros((16, 16, 3), dtype=np.float32)
    with pytest.raises(ValueError):
        compute_cam(img, 5, state, Branch.RELU)
