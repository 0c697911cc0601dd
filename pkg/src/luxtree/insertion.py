"""Virtual object insertion: mesh intersection, occlusion, cone-lit shading.

The object is a triangle mesh accelerated by a two-level uniform grid
(8^3 coarse cells, occupied ones refined 4^3). Shading samples the
lighting octree with a small cone bundle per surface point; the result is
composited over the input image wherever the mesh is the nearest surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OutsideBBox, SizeMismatch, ShapeMismatch
from .camera import Intrinsics
from .formats import tone_map
from .octree import LightingOctree
from .renderer import MarchConfig, march_batch

_COARSE = 8
_FINE = 4
_MIN_AREA = 1e-12
_T_MIN = 1e-9
_APEX_OFFSET = 1.5  # in finest voxel units, along the shading normal
_ROUGH_MIN = 1e-3
_ROUGH_MAX = np.pi / 4 - 1e-6


@dataclass
class Material:
    kind: str                 # "diffuse" or "metallic"
    albedo: np.ndarray        # (3,) in [0,1]
    roughness: float = 0.5    # metallic only: cone angle = roughness*pi/4

    def __post_init__(self):
        if self.kind not in ("diffuse", "metallic"):
            raise ValueError(f"unknown material kind '{self.kind}'")
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.albedo.shape != (3,) or np.any(self.albedo < 0.0) \
                or np.any(self.albedo > 1.0):
            raise ValueError("albedo must be three values in [0, 1]")
        if self.kind == "metallic" and not 0.0 < self.roughness <= 1.0:
            raise ValueError("metallic roughness must be in (0, 1]")


@dataclass
class TriangleMesh:
    vertices: np.ndarray             # (V,3) world units
    faces: np.ndarray                # (F,3) int indices
    material: Material | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ShapeMismatch(f"vertices want (V,3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ShapeMismatch(f"faces want (F,3), got {self.faces.shape}")
        if self.faces.size and (self.faces.min() < 0
                                or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        v = self.vertices[self.faces]
        areas = 0.5 * np.linalg.norm(
            np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
        if np.any(areas <= _MIN_AREA):
            bad = int(np.argmax(areas <= _MIN_AREA))
            raise ValueError(f"triangle {bad} is degenerate (area <= 1e-12)")

    def transformed(self, m: np.ndarray) -> "TriangleMesh":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        v = self.vertices @ m[:3, :3].T + m[:3, 3]
        return TriangleMesh(v, self.faces.copy(), self.material)


@dataclass
class Hit:
    t: float
    tri: int
    bary: tuple[float, float]  # (u, v) of the hit inside the triangle
    normal: np.ndarray         # unit, oriented toward the ray origin


@dataclass
class TriGrid:
    """Two-level uniform grid over the mesh AABB with per-cell triangles."""

    mesh: TriangleMesh
    lo: np.ndarray
    hi: np.ndarray
    cells: dict = field(repr=False, default_factory=dict)
    # cached triangle data for the intersector
    v0: np.ndarray = field(repr=False, default=None)
    e1: np.ndarray = field(repr=False, default=None)
    e2: np.ndarray = field(repr=False, default=None)


def _cell_ranges(tri_lo, tri_hi, origin, step, dims):
    a = np.clip(((tri_lo - origin) / step).astype(np.int64), 0, dims - 1)
    b = np.clip(((tri_hi - origin) / step).astype(np.int64), 0, dims - 1)
    return a, b


def build_trigrid(mesh: TriangleMesh) -> TriGrid:
    """Register every triangle in each cell its AABB overlaps."""
    v = mesh.vertices
    f = mesh.faces
    lo = v.min(axis=0)
    hi = v.max(axis=0)
    pad = 1e-9 + 1e-6 * float((hi - lo).max())
    lo = lo - pad
    hi = hi + pad
    coarse_h = (hi - lo) / _COARSE
    tv = v[f]
    tri_lo = tv.min(axis=1)
    tri_hi = tv.max(axis=1)

    ca, cb = _cell_ranges(tri_lo, tri_hi, lo, coarse_h, _COARSE)
    coarse: dict[tuple, list[int]] = {}
    for tid in range(len(f)):
        for x in range(ca[tid, 0], cb[tid, 0] + 1):
            for y in range(ca[tid, 1], cb[tid, 1] + 1):
                for z in range(ca[tid, 2], cb[tid, 2] + 1):
                    coarse.setdefault((x, y, z), []).append(tid)

    fine_h = coarse_h / _FINE
    cells: dict[tuple, dict[tuple, np.ndarray]] = {}
    for ckey, tids in coarse.items():
        origin = lo + np.asarray(ckey, dtype=np.float64) * coarse_h
        ta = np.asarray(tids)
        fa, fb = _cell_ranges(tri_lo[ta], tri_hi[ta], origin, fine_h, _FINE)
        fine: dict[tuple, list[int]] = {}
        for j, tid in enumerate(tids):
            for x in range(fa[j, 0], fb[j, 0] + 1):
                for y in range(fa[j, 1], fb[j, 1] + 1):
                    for z in range(fa[j, 2], fb[j, 2] + 1):
                        fine.setdefault((x, y, z), []).append(tid)
        cells[ckey] = {k: np.asarray(t, dtype=np.int64)
                       for k, t in fine.items()}

    v0 = tv[:, 0]
    return TriGrid(mesh, lo, hi, cells, v0=v0,
                   e1=tv[:, 1] - v0, e2=tv[:, 2] - v0)


def _slab(origin, direction, lo, hi):
    """Ray/box parameter interval clipped to t >= 0, or None."""
    t0, t1 = 0.0, np.inf
    for ax in range(3):
        d = direction[ax]
        if abs(d) < 1e-15:
            if origin[ax] < lo[ax] or origin[ax] > hi[ax]:
                return None
            continue
        a = (lo[ax] - origin[ax]) / d
        b = (hi[ax] - origin[ax]) / d
        if a > b:
            a, b = b, a
        t0 = max(t0, a)
        t1 = min(t1, b)
    if t0 > t1:
        return None
    return t0, t1


def grid_walk(origin, direction, lo, step, dims, t0, t1):
    """3D DDA over a uniform grid; yields (cell, t_enter, t_exit) in
    strictly increasing t order."""
    out = []
    probe = origin + (t0 + 1e-12) * direction
    c = np.clip(((probe - lo) / step).astype(np.int64), 0, np.asarray(dims) - 1)
    stp = np.where(direction > 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        nxt = lo + (c + (stp > 0)) * step
        tmax = np.where(np.abs(direction) > 1e-15,
                        (nxt - origin) / direction, np.inf)
        tdelta = np.where(np.abs(direction) > 1e-15,
                          step / np.abs(direction), np.inf)
    t = t0
    while t <= t1 + 1e-12:
        ax = int(np.argmin(tmax))
        out.append(((int(c[0]), int(c[1]), int(c[2])), t,
                    min(float(tmax[ax]), t1)))
        t = float(tmax[ax])
        c[ax] += stp[ax]
        if c[ax] < 0 or c[ax] >= dims[ax]:
            break
        tmax[ax] += tdelta[ax]
    return out


def _mt_hits(origin, direction, v0, e1, e2):
    """Moller-Trumbore over a triangle batch; both faces count.

    Returns (t, u, v, valid) arrays.
    """
    pvec = np.cross(np.broadcast_to(direction, e2.shape), e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("j,ij->i", direction, qvec) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    valid = (ok & (u >= -1e-12) & (v >= -1e-12)
             & (u + v <= 1.0 + 1e-12) & (t > _T_MIN))
    return t, u, v, valid


def intersect(grid: TriGrid, origin, direction) -> Hit | None:
    """Nearest mesh hit along the ray, or None; normal faces the origin."""
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    span = _slab(origin, direction, grid.lo, grid.hi)
    if span is None:
        return None
    coarse_h = (grid.hi - grid.lo) / _COARSE
    fine_h = coarse_h / _FINE
    best_t = np.inf
    best: Hit | None = None
    for ckey, ct0, ct1 in grid_walk(origin, direction, grid.lo, coarse_h,
                                    (_COARSE,) * 3, span[0], span[1]):
        fine = grid.cells.get(ckey)
        if fine is None:
            if best is not None:
                return best
            continue
        corigin = grid.lo + np.asarray(ckey, dtype=np.float64) * coarse_h
        for fkey, ft0, ft1 in grid_walk(origin, direction, corigin, fine_h,
                                        (_FINE,) * 3, ct0, ct1):
            tids = fine.get(fkey)
            if tids is None:
                continue
            t, u, v, valid = _mt_hits(origin, direction, grid.v0[tids],
                                      grid.e1[tids], grid.e2[tids])
            # hits outside this cell's t-range re-appear in their own cell
            valid &= (t >= ft0 - 1e-9) & (t <= ft1 + 1e-9) & (t < best_t)
            if np.any(valid):
                j = int(np.argmin(np.where(valid, t, np.inf)))
                tri = int(tids[j])
                n = np.cross(grid.e1[tri], grid.e2[tri])
                n /= np.linalg.norm(n)
                if np.dot(n, direction) > 0.0:
                    n = -n
                best_t = float(t[j])
                best = Hit(best_t, tri, (float(u[j]), float(v[j])), n)
            if best is not None and best_t <= ft1 + 1e-9:
                return best
    return best


# ------------------------------------------------------------------ shading

_COS_ELEV = np.sqrt(3.0) / 2.0  # cone tilt 30 degrees off the normal
_DIFFUSE_W = np.array([0.25] + [0.15] * 5)
_DIFFUSE_COS = np.array([1.0] + [_COS_ELEV] * 5)
_DIFFUSE_THETA = np.pi / 6


def _tangent_frame(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal tangents for unit normals (P,3)."""
    a = np.where(np.abs(n[:, :1]) > 0.9,
                 np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0]))
    t1 = np.cross(n, a)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    return t1, np.cross(n, t1)


def _shade_batch(positions, normals, view_dirs, material, tree, cfg):
    pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    nrm = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    unit = tree.bbox.world_to_unit(pos)
    if np.any(unit < 0.0) or np.any(unit > 1.0):
        bad = int(np.argmax(np.any((unit < 0.0) | (unit > 1.0), axis=1)))
        raise OutsideBBox(f"point {bad} at {pos[bad]} outside the lit volume")
    apex = unit + _APEX_OFFSET * tree.leaf_size * nrm

    if material.kind == "diffuse":
        t1, t2 = _tangent_frame(nrm)
        az = 2.0 * np.pi * np.arange(5) / 5.0
        tilt = np.sqrt(1.0 - _COS_ELEV ** 2)
        dirs = np.empty((pos.shape[0], 6, 3))
        dirs[:, 0] = nrm
        for k in range(5):
            dirs[:, k + 1] = (_COS_ELEV * nrm
                              + tilt * (np.cos(az[k]) * t1
                                        + np.sin(az[k]) * t2))
        apexes = np.repeat(apex, 6, axis=0)
        st = march_batch(tree, apexes, dirs.reshape(-1, 3),
                         _DIFFUSE_THETA, cfg)
        rad = st.radiance.reshape(pos.shape[0], 6, 3)
        wc = _DIFFUSE_W * _DIFFUSE_COS
        lit = np.einsum("k,pkc->pc", wc, rad) / wc.sum()
        return material.albedo * lit

    view = np.atleast_2d(np.asarray(view_dirs, dtype=np.float64))
    view = view / np.linalg.norm(view, axis=1, keepdims=True)
    refl = view - 2.0 * np.einsum("ij,ij->i", view, nrm)[:, None] * nrm
    refl /= np.linalg.norm(refl, axis=1, keepdims=True)
    theta = float(np.clip(material.roughness * np.pi / 4,
                          _ROUGH_MIN, _ROUGH_MAX))
    st = march_batch(tree, apex, refl, theta, cfg)
    return material.albedo * st.radiance


def shade_point(position, normal, view_dir, material: Material,
                tree: LightingOctree, cfg: MarchConfig | None = None):
    """Cone-sampled lighting for one surface point; see _shade_batch."""
    if cfg is None:
        cfg = MarchConfig(weight_mode="unit")
    return _shade_batch(position, normal, view_dir, material, tree, cfg)[0]


# ---------------------------------------------------------------- occlusion

def occlusion_depth(source, intr: Intrinsics) -> np.ndarray:
    """Per-pixel nearest scene z; +inf where nothing is known.

    Accepts the input depth image directly or a camera-frame point cloud
    (projected with the same pixel-center convention as backproject).
    """
    if isinstance(source, np.ndarray):
        depth = np.asarray(source, dtype=np.float64)
        if depth.shape != (intr.height, intr.width):
            raise SizeMismatch(f"depth {depth.shape} vs intrinsics "
                               f"{(intr.height, intr.width)}")
        out = depth.copy()
        out[~np.isfinite(out) | (out <= 0.0)] = np.inf
        return out
    pos = np.asarray(source.positions, dtype=np.float64)
    buf = np.full((intr.height, intr.width), np.inf)
    z = pos[:, 2]
    ok = z > 0.0
    u = np.floor(intr.fx * pos[ok, 0] / z[ok] + intr.cx).astype(np.int64)
    v = np.floor(intr.fy * pos[ok, 1] / z[ok] + intr.cy).astype(np.int64)
    inside = (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    np.minimum.at(buf, (v[inside], u[inside]), z[ok][inside])
    return buf


# --------------------------------------------------------------- compositing

def insert_render(image, depth, intr: Intrinsics, mesh: TriangleMesh,
                  material: Material, tree: LightingOctree,
                  transform: np.ndarray | None = None,
                  cfg: MarchConfig | None = None,
                  gamma: float = 2.2) -> tuple[np.ndarray, np.ndarray]:
    """Composite the shaded mesh over the input; returns (HDR, LDR uint8).

    The camera sits at the origin of the mesh/octree frame looking down +z
    (the frame the octree was built in). Rays are parameterized by z, so
    hits compare directly against the scene depth buffer. Pixels the mesh
    does not win stay bit-identical to the input.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (intr.height, intr.width, 3):
        raise SizeMismatch(f"image {image.shape} vs intrinsics "
                           f"{(intr.height, intr.width, 3)}")
    scene_z = occlusion_depth(np.asarray(depth, dtype=np.float64), intr)
    if cfg is None:
        cfg = MarchConfig(weight_mode="unit")
    if transform is not None:
        mesh = mesh.transformed(transform)
    grid = build_trigrid(mesh)

    u, v = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    dirs = np.stack([
        (u + 0.5 - intr.cx) / intr.fx,
        (v + 0.5 - intr.cy) / intr.fy,
        np.ones_like(u, dtype=np.float64),
    ], axis=-1).reshape(-1, 3)

    # cheap AABB cull before the per-ray grid walk
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (grid.lo[None, :] - 0.0) * inv
        tb = (grid.hi[None, :] - 0.0) * inv
    tmin = np.minimum(ta, tb).max(axis=1)
    tmax = np.maximum(ta, tb).min(axis=1)
    candidates = np.flatnonzero((tmax >= np.maximum(tmin, 0.0)))

    zflat = scene_z.reshape(-1)
    hit_px: list[int] = []
    hit_pos: list[np.ndarray] = []
    hit_nrm: list[np.ndarray] = []
    hit_dir: list[np.ndarray] = []
    origin = np.zeros(3)
    for i in candidates:
        h = intersect(grid, origin, dirs[i])
        if h is None or h.t >= zflat[i] - 1e-9:
            continue
        hit_px.append(int(i))
        hit_pos.append(h.t * dirs[i])
        hit_nrm.append(h.normal)
        hit_dir.append(dirs[i] / np.linalg.norm(dirs[i]))

    out = image.copy()
    if hit_px:
        shaded = _shade_batch(np.array(hit_pos), np.array(hit_nrm),
                              np.array(hit_dir), material, tree, cfg)
        out.reshape(-1, 3)[np.array(hit_px)] = shaded
    ldr = np.clip(np.rint(tone_map(out) ** (1.0 / gamma) * 255.0),
                  0, 255).astype(np.uint8)
    return out, ldr
