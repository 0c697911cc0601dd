"""Cone marcher: schedule, mip selection, forward pass, oracle agreement."""

import math

import numpy as np
import pytest

from luxtree import octree as ot
from luxtree import renderer as rd
from luxtree.camera import Cone, panorama_cones
from luxtree.errors import DegenerateSchedule


def make_tree(seed=0, depth=4, n=2000, sigma=30.0):
    rng = np.random.default_rng(seed)
    cloud = ot.PointCloud(rng.random((n, 3)), rng.random((n, 3)))
    tree = ot.build_octree(cloud, depth, sigma_surface=sigma)
    return ot.aggregate_mips(tree)


def test_schedule_closed_form_matches_recurrence():
    rng = np.random.default_rng(1)
    for _ in range(50):
        c0 = float(rng.uniform(0.002, 0.1))
        growth = float(rng.uniform(0.5, 3.0))
        theta = float(rng.uniform(0.01, 0.4))
        cfg = rd.MarchConfig(c0=c0, growth=growth)
        s, delta = rd.sample_schedule(cfg, theta)
        assert s[0] == c0 and delta[0] == c0
        # recurrence: delta_n = growth * s_{n-1} * tan(theta)
        si = c0
        for k in range(1, len(s)):
            dk = growth * si * math.tan(theta)
            si = si + dk
            assert abs(s[k] - si) <= 1e-12 * si
            assert abs(delta[k] - dk) <= 1e-9 * dk
        assert s[-1] <= cfg.s_max
        # one more step would overflow s_max
        assert s[-1] * (1 + growth * math.tan(theta)) > cfg.s_max
        # arc lengths are consistent partial sums of the steps
        np.testing.assert_allclose(np.cumsum(delta), s, rtol=1e-12)


def test_schedule_uniform_fallback_for_rays():
    cfg = rd.MarchConfig(c0=0.01)
    s, delta = rd.sample_schedule(cfg, 0.0)
    assert np.all(delta == 0.01)
    np.testing.assert_allclose(s, 0.01 * np.arange(1, len(s) + 1))
    assert s[-1] <= cfg.s_max < s[-1] + 0.011


def test_schedule_degenerate_raises():
    with pytest.raises(DegenerateSchedule):
        rd.sample_schedule(rd.MarchConfig(c0=1e-9), 0.0)


def test_schedule_needs_resolved_c0():
    with pytest.raises(ValueError):
        rd.sample_schedule(rd.MarchConfig(c0=None), 0.1)


def test_select_depth_hand_cases():
    # footprint 1/32 over leaves of 1/128: two doublings -> two levels up
    d = rd.select_depth(np.array([1 / 32]), np.array([0.001]), 0.0, 7)
    assert d[0] == 5
    # exact leaf-size footprint stays at the finest level
    d = rd.select_depth(np.array([1 / 128]), np.array([0.001]), 0.0, 7)
    assert d[0] == 7
    # sub-leaf footprints clamp to the finest level
    d = rd.select_depth(np.array([1 / 512]), np.array([0.001]), 0.0, 7)
    assert d[0] == 7
    # huge footprints clamp to the root
    d = rd.select_depth(np.array([10.0]), np.array([0.5]), 0.0, 7)
    assert d[0] == 0


def test_select_depth_uses_cone_diameter():
    # delta small but the cone is fat: 2*s*tan(theta) = 0.25 -> 2 levels up
    theta = math.atan(0.25)
    d = rd.select_depth(np.array([1 / 16]), np.array([0.5]), theta, 4)
    assert d[0] == 2


def test_floor_log2_exact_at_powers():
    x = np.array([0.24999999999999997, 0.25, 0.25000000000000006, 1.0, 2.0 ** -20])
    np.testing.assert_array_equal(rd._floor_log2(x), [-3, -2, -2, 0, -20])


def test_trace_hand_case_two_leaves():
    # ray through two depth-1 voxels, sigma*delta = ln 2 each, unit weights:
    # alphas 1/2, transmittances 1 then 1/2
    keys = ot.encode_keys(np.array([[0, 0, 0], [1, 0, 0]]))
    sig = math.log(2) / 0.48
    tree = ot.from_leaves(
        1, keys, np.array([[1.0, 0, 0], [0, 1.0, 0]]), np.array([sig, sig])
    )
    cfg = rd.MarchConfig(
        c0=0.48, theta_override=0.0, t_min_transmittance=0.0,
        weight_mode="unit", s_max=1.3,
    )
    cone = Cone(np.array([0.01, 0.25, 0.25]), np.array([1.0, 0.0, 0.0]), 0.0)
    res = rd.trace_cone(tree, cone, cfg)
    np.testing.assert_allclose(res.radiance, [0.5, 0.25, 0.0], atol=1e-12)
    # depth: 1*0.5*0.48 + 0.5*0.5*0.96
    assert res.depth == pytest.approx(0.48, abs=1e-12)
    assert list(res.samples.level[:2]) == [1, 1]
    np.testing.assert_allclose(res.samples.transmittance[:2], [1.0, 0.5])


def test_trace_empty_octree_black():
    tree = ot.empty_octree(4)
    cone = Cone(np.array([0.5, 0.5, 0.5]), np.array([0.0, 1.0, 0.0]), 0.1)
    res = rd.trace_cone(tree, cone, rd.MarchConfig())
    np.testing.assert_array_equal(res.radiance, np.zeros(3))
    assert res.depth == 0.0


def test_trace_miss_cube_is_zero():
    tree = make_tree()
    cone = Cone(np.array([2.0, 2.0, 2.0]), np.array([0.0, 1.0, 0.0]), 0.05)
    res = rd.trace_cone(tree, cone, rd.MarchConfig())
    np.testing.assert_array_equal(res.radiance, np.zeros(3))
    assert not np.any(res.samples.found)


def test_trace_apex_outside_enters_cube():
    keys = ot.encode_keys(np.array([[0, 0, 0]]))
    tree = ot.from_leaves(1, keys, np.array([[1.0, 1.0, 1.0]]), 1000.0)
    cone = Cone(np.array([-1.0, 0.25, 0.25]), np.array([1.0, 0.0, 0.0]), 0.0)
    cfg = rd.MarchConfig(c0=0.25, weight_mode="unit", theta_override=0.0)
    res = rd.trace_cone(tree, cone, cfg)
    assert res.radiance[0] > 0.9
    # expected depth is measured from the apex, past the entry wall
    assert res.depth > 1.0


def test_trace_opaque_voxel_unit_mode():
    # a thick voxel right in front of the apex returns its own color
    keys = ot.encode_keys(np.array([[2, 2, 2]]))
    tree = ot.from_leaves(2, keys, np.array([[0.3, 0.6, 0.9]]), 256.0)
    cone = Cone(np.array([0.625, 0.625, 0.1]), np.array([0.0, 0.0, 1.0]), 0.0)
    cfg = rd.MarchConfig(weight_mode="unit", c0=1 / 8)
    res = rd.trace_cone(tree, cone, cfg)
    # two samples inside the slab saturate the optical depth completely
    np.testing.assert_allclose(res.radiance, [0.3, 0.6, 0.9], rtol=1e-9)


def test_radiance_nonnegative_and_bounded():
    tree = make_tree(seed=3, sigma=80.0)
    rng = np.random.default_rng(4)
    cfg = rd.MarchConfig(weight_mode="unit")
    peak = tree.levels[-1].features[:, :3].max()
    for _ in range(40):
        apex = rng.random(3)
        ax = rng.normal(size=3)
        ax /= np.linalg.norm(ax)
        res = rd.trace_cone(tree, Cone(apex, ax, float(rng.uniform(0, 0.3))), cfg)
        assert np.all(res.radiance >= 0.0)
        # unit-mode emission never exceeds the brightest feature by much
        assert np.all(res.radiance <= peak * 1.01 + 1e-9)
        assert 0.0 <= res.depth <= cfg.s_max + 1.0


def test_early_exit_threshold_monotone():
    tree = make_tree(seed=5, sigma=200.0)
    cone = Cone(np.array([0.1, 0.5, 0.5]), np.array([1.0, 0.0, 0.0]), 0.05)
    lo = rd.trace_cone(tree, cone, rd.MarchConfig(t_min_transmittance=0.0))
    hi = rd.trace_cone(tree, cone, rd.MarchConfig(t_min_transmittance=1e-2))
    # cutting the tail can only remove light
    assert np.all(hi.radiance <= lo.radiance + 1e-15)
    # and the tail it removes is bounded by the threshold itself
    assert np.all(lo.radiance - hi.radiance <= 1e-2 * (1 + lo.radiance.max()))


def test_paper_weights_dim_vs_unit():
    tree = make_tree(seed=6)
    cone = Cone(np.array([0.5, 0.5, 0.05]), np.array([0.0, 0.0, 1.0]), 0.1)
    rp = rd.trace_cone(tree, cone, rd.MarchConfig(weight_mode="paper"))
    ru = rd.trace_cone(tree, cone, rd.MarchConfig(weight_mode="unit"))
    assert np.all(rp.radiance <= ru.radiance + 1e-12)


def test_solid_block_mip_consistent_across_angles():
    # a solid uniform cube: coarse mips carry the same optical density, so
    # fat cones (coarse mips) and thin cones agree in unit mode
    res = 8
    g = (np.arange(res) + 0.5) / res
    cells = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    cloud = ot.PointCloud(cells, np.full((res ** 3, 3), 0.7))
    tree = ot.aggregate_mips(ot.build_octree(cloud, 3, sigma_surface=400.0))
    apex = np.array([0.5, 0.5, 0.02])
    axis = np.array([0.0, 0.0, 1.0])
    vals = []
    for theta in (0.005, 0.05, 0.2):
        r = rd.trace_cone(tree, Cone(apex, axis, theta), rd.MarchConfig(weight_mode="unit"))
        vals.append(r.radiance[0])
    assert max(vals) - min(vals) < 0.02
    assert vals[0] == pytest.approx(0.7, rel=0.01)


def test_render_image_matches_trace_cone():
    tree = make_tree(seed=7)
    grid = panorama_cones(24, 12, None)
    grid.apexes[:] = np.array([0.4, 0.5, 0.6])
    cfg = rd.MarchConfig()
    rad, dep = rd.render_image(tree, grid, cfg)
    assert rad.shape == (12, 24, 3) and dep.shape == (12, 24)
    flat_r = rad.reshape(-1, 3)
    flat_d = dep.ravel()
    for i in range(0, len(grid), 17):
        res = rd.trace_cone(tree, grid[i], cfg)
        np.testing.assert_array_equal(res.radiance, flat_r[i])
        assert res.depth == flat_d[i]


def test_render_image_deterministic_and_chunk_invariant():
    tree = make_tree(seed=8)
    grid = panorama_cones(32, 16, None)
    grid.apexes[:] = np.array([0.5, 0.5, 0.5])
    cfg = rd.MarchConfig()
    a = rd.render_image(tree, grid, cfg)
    b = rd.render_image(tree, grid, cfg)
    c = rd.render_image(tree, grid, cfg, chunk=7)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[0], c[0])
    np.testing.assert_array_equal(a[1], c[1])


def test_oracle_agreement_fixed_step():
    tree = make_tree(seed=9, depth=4, n=3000)
    cfg = rd.MarchConfig(
        c0=tree.leaf_size / 2, theta_override=0.0,
        t_min_transmittance=0.0, weight_mode="unit",
    )
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(150):
        apex = rng.random(3) * 0.8 + 0.1
        ax = rng.normal(size=3)
        ax /= np.linalg.norm(ax)
        cone = Cone(apex, ax, 0.0)
        fast = rd.trace_cone(tree, cone, cfg).radiance
        ref = rd.trace_cone_oracle(tree, cone)
        worst = max(worst, float(np.abs(fast - ref).max()))
    assert worst < 1e-9


def test_oracle_agreement_apex_outside():
    tree = make_tree(seed=11, depth=3, n=500)
    cfg = rd.MarchConfig(
        c0=tree.leaf_size / 2, theta_override=0.0,
        t_min_transmittance=0.0, weight_mode="unit",
    )
    rng = np.random.default_rng(12)
    for _ in range(50):
        apex = rng.random(3) * 3 - 1
        target = rng.random(3)
        ax = target - apex
        ax /= np.linalg.norm(ax)
        cone = Cone(apex, ax, 0.0)
        fast = rd.trace_cone(tree, cone, cfg).radiance
        ref = rd.trace_cone_oracle(tree, cone)
        np.testing.assert_allclose(fast, ref, atol=1e-9)


def test_coarse_leaf_covers_deep_queries():
    # an unsplit depth-1 node must answer fine-depth samples inside it
    keys = ot.encode_keys(np.array([[0, 0, 0]]))
    tree = ot.from_leaves(1, keys, np.array([[0.8, 0.1, 0.1]]), 50.0)
    tree.max_depth = 3
    tree.levels += [
        ot.OctreeLevel(np.empty(0, dtype=np.uint64), np.empty(0, dtype=np.uint8),
                       np.empty((0, 4)))
        for _ in range(2)
    ]
    cone = Cone(np.array([0.05, 0.25, 0.25]), np.array([1.0, 0.0, 0.0]), 0.0)
    cfg = rd.MarchConfig(c0=1 / 16, weight_mode="unit", theta_override=0.0)
    res = rd.trace_cone(tree, cone, cfg)
    assert res.radiance[0] > 0.5
    lv = res.samples.level[res.samples.found]
    assert np.all(lv == 1)
