import numpy as np
import pytest

import luxtree.metrics as mt
import luxtree.octree as ot
from luxtree.errors import (DepthMismatch, EmptyMask, NegativeInput,
                            ShapeMismatch)


def test_log_l2_identical_is_zero():
    img = np.random.default_rng(0).random((8, 16, 3)) * 5
    assert mt.log_l2(img, img) == 0.0


def test_log_l2_hand_value():
    pred = np.full((4, 4), np.e - 1.0)
    gt = np.zeros((4, 4))
    # log1p(e - 1) = 1, so every pixel contributes 1.0
    np.testing.assert_allclose(mt.log_l2(pred, gt), 1.0, rtol=1e-14)


def test_log_l2_symmetric():
    rng = np.random.default_rng(1)
    a = rng.random((5, 7, 3)) * 3
    b = rng.random((5, 7, 3)) * 3
    assert mt.log_l2(a, b) == mt.log_l2(b, a)


def test_log_l2_errors():
    with pytest.raises(ShapeMismatch):
        mt.log_l2(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(NegativeInput):
        mt.log_l2(np.array([-0.1]), np.array([0.0]))


def test_scale_invariant_exact_zero_for_pow2_scales():
    rng = np.random.default_rng(2)
    gt = rng.random((12, 24)) * 4 + 0.05
    for k in (0.5, 1.0, 2.0):
        assert mt.scale_invariant_l2(k * gt, gt) == 0.0


def test_scale_invariant_near_zero_for_any_scale():
    rng = np.random.default_rng(3)
    gt = rng.random((10, 10)) + 0.1
    assert mt.scale_invariant_l2(3.7 * gt, gt) < 1e-28


def test_scale_invariant_two_pixel_hand_case():
    pred = np.array([1.0, 2.0])
    gt = np.array([1.0, 1.0])
    # g = (0, ln 2): mean of squares minus squared mean = (ln 2)^2 / 4
    want = np.log(2.0) ** 2 / 4.0
    np.testing.assert_allclose(mt.scale_invariant_l2(pred, gt), want,
                               rtol=1e-14)


def test_scale_invariant_mask_and_errors():
    pred = np.array([1.0, 2.0, 50.0])
    gt = np.array([1.0, 1.0, 1.0])
    mask = np.array([True, True, False])
    want = np.log(2.0) ** 2 / 4.0
    np.testing.assert_allclose(mt.scale_invariant_l2(pred, gt, mask), want,
                               rtol=1e-14)
    with pytest.raises(EmptyMask):
        mt.scale_invariant_l2(pred, gt, np.zeros(3, dtype=bool))
    with pytest.raises(NegativeInput):
        mt.scale_invariant_l2(np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    with pytest.raises(ShapeMismatch):
        mt.scale_invariant_l2(pred, gt[:2])


def two_leaf_tree(extra=False):
    cells = [[0, 0, 0], [1, 1, 1]]
    if extra:
        cells.append([0, 0, 1])
    keys = ot.encode_keys(np.array(cells))
    colors = np.ones((len(cells), 3)) * 0.5
    return ot.from_leaves(1, keys, colors, 2.0)


def test_octree_bce_gt_as_probs_near_zero():
    gt = two_leaf_tree()
    assert mt.octree_bce(gt, gt) < 1e-6


def test_octree_bce_half_probs_ln2_per_level():
    gt = two_leaf_tree()
    probs = [np.full(len(lv), 0.5) for lv in gt.levels]
    want = np.log(2.0) * len([lv for lv in gt.levels if len(lv)])
    np.testing.assert_allclose(mt.octree_bce(gt, gt, probs), want, rtol=1e-12)


def test_octree_bce_hand_case_with_unmatched_node():
    gt = two_leaf_tree(extra=False)
    pred = two_leaf_tree(extra=True)
    probs = [np.array([0.9]), np.array([0.7, 0.2, 0.6])]
    # labels: root split -> 1; all depth-1 nodes unsplit or absent -> 0
    lvl0 = -np.log(0.9)
    lvl1 = np.mean(-np.log1p(-probs[1]))
    want = lvl0 + lvl1
    np.testing.assert_allclose(mt.octree_bce(pred, gt, probs), want,
                               rtol=1e-12)


def test_octree_bce_depth_mismatch():
    a = two_leaf_tree()
    b = ot.from_leaves(2, ot.encode_keys(np.array([[1, 1, 1]])),
                       np.ones((1, 3)), 1.0)
    with pytest.raises(DepthMismatch):
        mt.octree_bce(a, b)


def test_sc_metric_identical_zero():
    rng = np.random.default_rng(4)
    probes = rng.random((3, 8, 16, 3))
    depth = rng.random((3, 8, 16)) + 0.5
    assert mt.sc_metric(probes, probes, depth) == 0.0


def test_sc_metric_alpha_zero_is_mae():
    rng = np.random.default_rng(5)
    a = rng.random((2, 6, 12, 3))
    b = rng.random((2, 6, 12, 3))
    depth = rng.random((2, 6, 12)) * 3
    got = mt.sc_metric(a, b, depth, mt.SCConfig(alpha=0.0))
    np.testing.assert_allclose(got, np.mean(np.abs(a - b)), rtol=1e-14)


def test_sc_metric_constant_depth_hand_case():
    pred = np.full((1, 4, 8, 3), 0.75)
    gt = np.full((1, 4, 8, 3), 0.25)
    depth = np.full((1, 4, 8), 2.0)
    np.testing.assert_allclose(mt.sc_metric(pred, gt, depth), 0.5, rtol=1e-14)


def test_sc_metric_seam_wraps_azimuth():
    # a depth ramp along u: without wraparound the last column would see no
    # horizontal gradient; with it, the seam jump dominates
    H, W = 2, 8
    depth = np.tile(np.arange(W, dtype=np.float64), (H, 1))[None]
    pred = np.zeros((1, H, W, 3))
    gt = np.ones((1, H, W, 3))
    got = mt.sc_metric(pred, gt, depth, mt.SCConfig(alpha=1.0))
    du = np.abs(np.roll(depth[0], -1, axis=1) - depth[0])
    assert du[0, -1] == W - 1
    want = np.mean(np.exp(du))
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_sc_metric_monotone_in_error():
    rng = np.random.default_rng(6)
    gt = rng.random((2, 5, 9, 3))
    depth = rng.random((2, 5, 9)) * 2
    small = gt + 0.1
    large = gt + 0.3
    assert mt.sc_metric(large, gt, depth) > mt.sc_metric(small, gt, depth)


def test_sc_metric_shape_errors():
    with pytest.raises(ShapeMismatch):
        mt.sc_metric(np.zeros((1, 4, 4, 3)), np.zeros((1, 4, 5, 3)),
                     np.zeros((1, 4, 4)))
    with pytest.raises(ShapeMismatch):
        mt.sc_metric(np.zeros((1, 4, 4, 3)), np.zeros((1, 4, 4, 3)),
                     np.zeros((1, 4, 5)))


def test_psnr_values():
    img = np.random.default_rng(7).random((8, 8, 3))
    assert mt.psnr(img, img) == 99.0
    # MSE equal to peak^2 gives exactly 0 dB
    assert mt.psnr(np.ones(16), np.zeros(16), peak=1.0) == 0.0
    pred = np.zeros(100)
    gt = np.full(100, 0.1)
    np.testing.assert_allclose(mt.psnr(pred, gt, peak=1.0), 20.0, rtol=1e-12)


def test_psnr_errors_and_monotone():
    with pytest.raises(ShapeMismatch):
        mt.psnr(np.zeros(3), np.zeros(4))
    with pytest.raises(NegativeInput):
        mt.psnr(np.zeros(3), np.zeros(3), peak=0.0)
    gt = np.zeros(32)
    assert mt.psnr(gt + 0.01, gt) > mt.psnr(gt + 0.02, gt)


def test_loss_weights_and_sc_config_validate():
    mt.LossWeights(0.0, 2.0)
    with pytest.raises(NegativeInput):
        mt.LossWeights(-1.0, 1.0)
    with pytest.raises(NegativeInput):
        mt.SCConfig(alpha=-0.5)
