import numpy as np
import pytest

import luxtree.insertion as ins
import luxtree.octree as ot
import luxtree.scenes as sc
from luxtree.camera import Intrinsics, backproject
from luxtree.errors import OutsideBBox, SizeMismatch
from luxtree.renderer import MarchConfig


def sphere_mesh(center=(0.0, 0.0, 3.0), radius=1.0, n_lat=8, n_lon=12):
    v, f = sc.uv_sphere(center, radius, n_lat, n_lon)
    return ins.TriangleMesh(v, f)


def brute_force(mesh, origin, direction):
    v = mesh.vertices[mesh.faces]
    v0 = v[:, 0]
    t, u, w, ok = ins._mt_hits(np.asarray(origin, float),
                               np.asarray(direction, float),
                               v0, v[:, 1] - v0, v[:, 2] - v0)
    if not np.any(ok):
        return None
    j = int(np.argmin(np.where(ok, t, np.inf)))
    return float(t[j]), j


# ------------------------------------------------------------------ types

def test_material_validation():
    ins.Material("diffuse", [0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        ins.Material("glossy", [1, 1, 1])
    with pytest.raises(ValueError):
        ins.Material("diffuse", [1.5, 0, 0])
    with pytest.raises(ValueError):
        ins.Material("metallic", [1, 1, 1], roughness=0.0)


def test_mesh_validation():
    with pytest.raises(ValueError):
        ins.TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 5]]))
    # zero-area triangle
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)
    with pytest.raises(ValueError):
        ins.TriangleMesh(v, np.array([[0, 1, 2]]))


# ------------------------------------------------------------------ grid

def test_single_triangle_registered_somewhere():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    grid = ins.build_trigrid(ins.TriangleMesh(v, np.array([[0, 1, 2]])))
    total = sum(len(t) for fine in grid.cells.values() for t in fine.values())
    assert total >= 1


def test_coverage_every_surface_point_is_listed():
    rng = np.random.default_rng(0)
    mesh = sphere_mesh(n_lat=6, n_lon=9)
    grid = ins.build_trigrid(mesh)
    coarse_h = (grid.hi - grid.lo) / ins._COARSE
    fine_h = coarse_h / ins._FINE
    v = mesh.vertices[mesh.faces]
    for _ in range(300):
        tid = int(rng.integers(len(mesh.faces)))
        a, b = rng.random(2)
        if a + b > 1:
            a, b = 1 - a, 1 - b
        p = v[tid, 0] + a * (v[tid, 1] - v[tid, 0]) + b * (v[tid, 2] - v[tid, 0])
        ckey = tuple(np.clip(((p - grid.lo) / coarse_h).astype(int), 0,
                             ins._COARSE - 1))
        assert ckey in grid.cells
        origin = grid.lo + np.asarray(ckey) * coarse_h
        fkey = tuple(np.clip(((p - origin) / fine_h).astype(int), 0,
                             ins._FINE - 1))
        assert fkey in grid.cells[ckey]
        assert tid in grid.cells[ckey][fkey]


def test_grid_walk_strictly_increasing_and_adjacent():
    rng = np.random.default_rng(1)
    lo = np.zeros(3)
    step = np.full(3, 0.25)
    for _ in range(50):
        o = rng.random(3) * 2
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        cells = ins.grid_walk(o, d, lo, step, (8, 8, 8), 0.0, 3.0)
        ts = [c[1] for c in cells]
        assert all(b > a for a, b in zip(ts, ts[1:]))
        for (c1, _, _), (c2, _, _) in zip(cells, cells[1:]):
            assert sum(abs(a - b) for a, b in zip(c1, c2)) == 1


def test_axis_aligned_quad_analytic_hit():
    v = np.array([[-1, -1, 2], [1, -1, 2], [1, 1, 2], [-1, 1, 2]], dtype=float)
    f = np.array([[0, 1, 2], [0, 2, 3]])
    grid = ins.build_trigrid(ins.TriangleMesh(v, f))
    h = ins.intersect(grid, np.zeros(3), np.array([0.0, 0.0, 1.0]))
    assert h is not None
    np.testing.assert_allclose(h.t, 2.0, rtol=1e-12)
    np.testing.assert_allclose(h.normal, [0, 0, -1.0], atol=1e-12)
    # and a clean miss
    assert ins.intersect(grid, np.zeros(3), np.array([0.0, 0.0, -1.0])) is None


def test_grid_matches_brute_force_on_1000_rays():
    rng = np.random.default_rng(2)
    mesh = sphere_mesh()
    grid = ins.build_trigrid(mesh)
    hits = 0
    for k in range(1000):
        if k % 2 == 0:
            o = rng.normal(size=3) * 0.2
            d = np.array([0.0, 0.0, 3.0]) + rng.normal(size=3) * 0.8 - o
        else:
            o = rng.uniform(-2, 2, 3) + np.array([0, 0, 3.0])
            d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        got = ins.intersect(grid, o, d)
        want = brute_force(mesh, o, d)
        if want is None:
            assert got is None
        else:
            assert got is not None
            hits += 1
            assert abs(got.t - want[0]) < 1e-10
            assert got.tri == want[1] or abs(got.t - want[0]) < 1e-12
    assert hits > 200


# ------------------------------------------------------------------ occlusion

def test_occlusion_depth_from_image_and_cloud():
    intr = Intrinsics(20.0, 20.0, 8.0, 6.0, 16, 12)
    depth = np.full((12, 16), 2.5)
    depth[0, 0] = 0.0
    buf = ins.occlusion_depth(depth, intr)
    assert buf[0, 0] == np.inf
    assert buf[3, 4] == 2.5

    cloud = ot.PointCloud(np.array([[0.0, 0.0, 2.0]]), np.ones((1, 3)))
    buf2 = ins.occlusion_depth(cloud, intr)
    assert buf2[6, 8] == 2.0
    assert np.sum(np.isfinite(buf2)) == 1


def test_occlusion_depth_roundtrip_through_backprojection():
    intr = Intrinsics(30.0, 30.0, 12.0, 9.0, 24, 18)
    u, v = np.meshgrid(np.arange(24), np.arange(18))
    depth = 1.5 + 0.01 * u + 0.02 * v
    cloud = backproject(depth, np.ones((18, 24, 3)), intr)
    buf = ins.occlusion_depth(cloud, intr)
    np.testing.assert_allclose(buf, depth, atol=1e-4)


def test_occlusion_depth_shape_guard():
    with pytest.raises(SizeMismatch):
        ins.occlusion_depth(np.zeros((4, 4)),
                            Intrinsics(1.0, 1.0, 2.0, 2.0, 5, 4))


# ------------------------------------------------------------------ shading

def test_shade_zero_octree_black():
    tree = ot.empty_octree(3)
    mat = ins.Material("diffuse", [1.0, 1.0, 1.0])
    got = ins.shade_point([0.5, 0.5, 0.5], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0],
                          mat, tree)
    assert np.all(got == 0.0)


def test_shade_outside_bbox_raises():
    tree = ot.empty_octree(3)
    mat = ins.Material("diffuse", [1.0, 1.0, 1.0])
    with pytest.raises(OutsideBBox):
        ins.shade_point([1.5, 0.5, 0.5], [0, 1.0, 0], [1.0, 0, 0], mat, tree)


def test_diffuse_shading_under_uniform_shell():
    tree = sc.shell_octree(5, radius=0.35, radiance=(1.5, 1.5, 1.5))
    mat = ins.Material("diffuse", [1.0, 1.0, 1.0])
    rng = np.random.default_rng(3)
    vals = []
    for _ in range(10):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        got = ins.shade_point([0.5, 0.5, 0.5], n, [1.0, 0.0, 0.0], mat, tree)
        vals.append(got)
    vals = np.array(vals)
    np.testing.assert_allclose(vals, 1.5, rtol=0.1)
    # half albedo scales linearly
    mat2 = ins.Material("diffuse", [0.5, 0.5, 0.5])
    got2 = ins.shade_point([0.5, 0.5, 0.5], [0, 1.0, 0], [1, 0.0, 0], mat2,
                           tree)
    np.testing.assert_allclose(got2, 0.75, rtol=0.1)


def test_metallic_mirror_reflects_emissive_voxel():
    keys = ot.encode_keys(np.array([[4, 4, 6]]))
    color = np.array([[0.9, 0.4, 0.2]])
    tree = ot.from_leaves(3, keys, color, 32.0)
    mat = ins.Material("metallic", [1.0, 1.0, 1.0], roughness=0.004)
    # mirror floor under the voxel: looking straight down reflects straight up
    got = ins.shade_point([0.5625, 0.5625, 0.4], [0.0, 0.0, 1.0],
                          [0.0, 0.0, -1.0], mat, tree,
                          MarchConfig(weight_mode="unit", c0=1 / 32))
    want = color[0] * (1 - np.exp(-32.0 * 0.125))
    np.testing.assert_allclose(got, want, rtol=0.05)


# ------------------------------------------------------------------ composite

def insert_fixture():
    intr = Intrinsics(24.0, 24.0, 12.0, 12.0, 24, 24)
    rng = np.random.default_rng(4)
    image = rng.random((24, 24, 3)) * 2.0
    depth = np.full((24, 24), 6.0)
    bbox = ot.WorldBBox(np.array([-2.0, -2.0, 0.0]), 4.0)
    cells = sc.shell_cells(4, radius=0.4)
    keys = ot.encode_keys(cells)
    colors = np.tile([1.2, 1.0, 0.8], (len(cells), 1))
    tree = ot.from_leaves(4, keys, colors, 16.0 * 16, bbox=bbox)
    return intr, image, depth, tree


def test_insert_mesh_outside_frustum_is_identity():
    intr, image, depth, tree = insert_fixture()
    mesh = sphere_mesh(center=(0.0, 0.0, -3.0), radius=0.4)
    mat = ins.Material("diffuse", [1.0, 1.0, 1.0])
    hdr, ldr = ins.insert_render(image, depth, intr, mesh, mat, tree)
    assert np.array_equal(hdr, image)
    assert ldr.shape == (24, 24, 3) and ldr.dtype == np.uint8


def test_insert_fully_occluded_is_identity():
    intr, image, depth, tree = insert_fixture()
    near = depth * 0 + 0.5  # wall right in front of the camera
    mesh = sphere_mesh(center=(0.0, 0.0, 2.0), radius=0.4, n_lat=6, n_lon=9)
    mat = ins.Material("diffuse", [1.0, 1.0, 1.0])
    hdr, _ = ins.insert_render(image, near, intr, mesh, mat, tree)
    assert np.array_equal(hdr, image)


def test_insert_composites_only_covered_pixels():
    intr, image, depth, tree = insert_fixture()
    mesh = sphere_mesh(center=(0.0, 0.0, 2.0), radius=0.4, n_lat=6, n_lon=9)
    mat = ins.Material("diffuse", [0.8, 0.8, 0.8])
    hdr, ldr = ins.insert_render(image, depth, intr, mesh, mat, tree)
    changed = np.any(hdr != image, axis=2)
    assert changed.any()
    # center pixel looks straight at the sphere
    assert changed[12, 12]
    # untouched pixels are bit-identical
    assert np.array_equal(hdr[~changed], image[~changed])
    # shaded pixels carry shell lighting scaled by albedo
    vals = hdr[changed]
    assert np.all(vals > 0.0)
    np.testing.assert_allclose(np.median(vals[:, 0]), 0.8 * 1.2, rtol=0.15)


def test_insert_shape_guard():
    intr, image, depth, tree = insert_fixture()
    mesh = sphere_mesh(center=(0.0, 0.0, 2.0), radius=0.4, n_lat=4, n_lon=6)
    mat = ins.Material("diffuse", [1.0, 1.0, 1.0])
    with pytest.raises(SizeMismatch):
        ins.insert_render(image[:10], depth, intr, mesh, mat, tree)


def test_insert_transform_moves_mesh():
    intr, image, depth, tree = insert_fixture()
    mesh = sphere_mesh(center=(0.0, 0.0, 0.0), radius=0.4, n_lat=6, n_lon=9)
    mat = ins.Material("diffuse", [1.0, 1.0, 1.0])
    m = np.eye(4)
    m[:3, 3] = [0.0, 0.0, 2.0]
    hdr, _ = ins.insert_render(image, depth, intr, mesh, mat, tree,
                               transform=m)
    assert np.any(hdr != image)
