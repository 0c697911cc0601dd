"""Synthetic scene generators shared by tests, benchmarks, and demos.

All scenes live in the unit cube. Cells are finest-depth integer voxel
coordinates; cloud generators place one point at each covered cell center
so a rebuild at the same depth reproduces the occupancy exactly.
"""

from __future__ import annotations

import numpy as np

from .camera import CameraPose
from .octree import LightingOctree, PointCloud, encode_keys, from_leaves


def surface_palette(centers: np.ndarray) -> np.ndarray:
    """Smooth LDR color field over the unit cube, bounded away from 0."""
    u, v, w = centers[:, 0], centers[:, 1], centers[:, 2]
    return np.stack([0.25 + 0.5 * u, 0.3 + 0.4 * v, 0.75 - 0.45 * w], axis=1)


def emissive_palette(centers: np.ndarray) -> np.ndarray:
    """Smooth HDR radiance field, range roughly [0.3, 2.0]."""
    u, v, w = centers[:, 0], centers[:, 1], centers[:, 2]
    r = 0.4 + 1.6 * np.sin(np.pi * u) ** 2 * (0.4 + 0.6 * v)
    g = 0.3 + 1.2 * np.sin(np.pi * v) ** 2 * (0.4 + 0.6 * w)
    b = 0.5 + 1.0 * np.sin(np.pi * w) ** 2 * (0.4 + 0.6 * u)
    return np.stack([r, g, b], axis=1)


def plane_cells(depth: int, axis: int = 2, offset: float = 0.35) -> np.ndarray:
    """Every voxel of the axis-aligned plane slab at the given offset."""
    res = 2 ** depth
    k = min(int(offset * res), res - 1)
    ij = np.stack(np.meshgrid(np.arange(res), np.arange(res), indexing="ij"),
                  axis=-1).reshape(-1, 2)
    cells = np.zeros((ij.shape[0], 3), dtype=np.int64)
    others = [a for a in range(3) if a != axis]
    cells[:, others[0]] = ij[:, 0]
    cells[:, others[1]] = ij[:, 1]
    cells[:, axis] = k
    return cells


def box_cells(depth: int, lo: float = 0.15, hi: float = 0.85) -> np.ndarray:
    """Voxels on the six faces of an inset axis-aligned box (deduplicated)."""
    res = 2 ** depth
    a = int(round(lo * res))
    b = int(round(hi * res)) - 1
    if b <= a:
        raise ValueError("box is thinner than one voxel at this depth")
    span = np.arange(a, b + 1)
    jj, kk = np.meshgrid(span, span, indexing="ij")
    faces = []
    for axis in range(3):
        others = [x for x in range(3) if x != axis]
        for fixed in (a, b):
            c = np.zeros((jj.size, 3), dtype=np.int64)
            c[:, others[0]] = jj.ravel()
            c[:, others[1]] = kk.ravel()
            c[:, axis] = fixed
            faces.append(c)
    cells = np.concatenate(faces)
    _, ix = np.unique(encode_keys(cells), return_index=True)
    return cells[ix]


def shell_cells(depth: int, radius: float = 0.35,
                center: float = 0.5) -> np.ndarray:
    """Voxels within one cell half-diagonal of a sphere around the center.

    The 0.87 (> sqrt(3)/2) band guarantees a watertight shell: every ray
    from the inside crosses at least one selected voxel.
    """
    res = 2 ** depth
    g = (np.arange(res) + 0.5) / res
    X, Y, Z = np.meshgrid(g, g, g, indexing="ij")
    r = np.sqrt((X - center) ** 2 + (Y - center) ** 2 + (Z - center) ** 2)
    m = np.abs(r - radius) <= 0.87 / res
    return np.argwhere(m).astype(np.int64)


def cell_centers(cells: np.ndarray, depth: int) -> np.ndarray:
    return (np.asarray(cells, dtype=np.float64) + 0.5) / 2 ** depth


def cells_to_cloud(cells: np.ndarray, depth: int,
                   colors: np.ndarray | None = None) -> PointCloud:
    centers = cell_centers(cells, depth)
    if colors is None:
        colors = surface_palette(centers)
    return PointCloud(centers, colors)


def scene_cloud(name: str, depth: int) -> PointCloud:
    """Named benchmark scene as a unit-cube point cloud."""
    if name == "plane":
        return cells_to_cloud(plane_cells(depth), depth)
    if name == "box":
        return cells_to_cloud(box_cells(depth), depth)
    if name == "shell":
        return cells_to_cloud(shell_cells(depth), depth)
    raise ValueError(f"unknown scene '{name}' (plane, box, shell)")


def plane_octree(depth: int, axis: int = 2, offset: float = 0.35,
                 sigma: float | None = None) -> LightingOctree:
    cells = plane_cells(depth, axis, offset)
    colors = surface_palette(cell_centers(cells, depth))
    if sigma is None:
        sigma = 4.0 * 2 ** depth
    return from_leaves(depth, encode_keys(cells), colors, sigma)


def box_octree(depth: int, lo: float = 0.15, hi: float = 0.85,
               sigma: float | None = None) -> LightingOctree:
    cells = box_cells(depth, lo, hi)
    colors = surface_palette(cell_centers(cells, depth))
    if sigma is None:
        sigma = 4.0 * 2 ** depth
    return from_leaves(depth, encode_keys(cells), colors, sigma)


def shell_octree(depth: int, radius: float = 0.35,
                 radiance: tuple[float, float, float] = (1.5, 1.5, 1.5),
                 sigma: float | None = None) -> LightingOctree:
    """Uniform emissive spherical shell; optically thick by default."""
    cells = shell_cells(depth, radius)
    colors = np.tile(np.asarray(radiance, dtype=np.float64), (len(cells), 1))
    if sigma is None:
        sigma = 16.0 * 2 ** depth
    return from_leaves(depth, encode_keys(cells), colors, sigma)


def emissive_box_octree(depth: int, lo: float = 0.15, hi: float = 0.85,
                        sigma: float | None = None) -> LightingOctree:
    """Hollow room with smoothly varying HDR wall radiance; fitting target."""
    cells = box_cells(depth, lo, hi)
    colors = emissive_palette(cell_centers(cells, depth))
    if sigma is None:
        sigma = 4.0 * 2 ** depth
    return from_leaves(depth, encode_keys(cells), colors, sigma)


def uv_sphere(center, radius: float, n_lat: int = 12,
              n_lon: int = 24) -> tuple[np.ndarray, np.ndarray]:
    """Latitude/longitude sphere mesh: (vertices (V,3), faces (F,3))."""
    center = np.asarray(center, dtype=np.float64)
    verts = [center + [0.0, radius, 0.0]]
    for i in range(1, n_lat):
        th = np.pi * i / n_lat
        for j in range(n_lon):
            ph = 2.0 * np.pi * j / n_lon
            verts.append(center + radius * np.array([
                np.sin(th) * np.cos(ph), np.cos(th), np.sin(th) * np.sin(ph)]))
    verts.append(center + [0.0, -radius, 0.0])
    south = len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * n_lon + (j % n_lon)

    faces = []
    for j in range(n_lon):
        faces.append([0, ring(1, j + 1), ring(1, j)])
        faces.append([south, ring(n_lat - 1, j), ring(n_lat - 1, j + 1)])
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append([a, b, d])
            faces.append([a, d, c])
    return np.asarray(verts), np.asarray(faces, dtype=np.int64)


def interior_poses(n: int, rng: np.random.Generator,
                   lo: float = 0.3, hi: float = 0.7) -> list[CameraPose]:
    """Random camera centers inside the scene with random yaw about +y."""
    poses = []
    for _ in range(n):
        t = rng.uniform(lo, hi, size=3)
        a = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(a), np.sin(a)
        rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        poses.append(CameraPose(rot, t))
    return poses
