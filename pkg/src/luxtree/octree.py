"""Sparse voxel octree with RGB + density features over the unit cube.

Nodes live in per-depth arrays sorted by shuffle key (Morton order). A key
packs 3 bits per subdivision step, x bit highest within each triple, so the
parent of any key is key >> 3. Depth 0 is the single root; leaves at depth
d_max have side l_0 = 2**-d_max.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyCloud, PointOutOfUnitCube

# Points exactly on the far cube faces are clamped inward by this much
# before voxelization so they land in the last cell instead of cell 2^d.
BOUNDARY_EPS = 2.0 ** -20


# ---------------------------------------------------------------------------
# shuffle keys

def spread_bits(v: np.ndarray) -> np.ndarray:
    """Spread the low 21 bits of each value so bit i lands at bit 3i."""
    v = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    v = (v | (v << 32)) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << 16)) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << 8)) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << 4)) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << 2)) & np.uint64(0x1249249249249249)
    return v


def compact_bits(v: np.ndarray) -> np.ndarray:
    """Inverse of spread_bits: gather every third bit back together."""
    v = v.astype(np.uint64) & np.uint64(0x1249249249249249)
    v = (v ^ (v >> 2)) & np.uint64(0x10C30C30C30C30C3)
    v = (v ^ (v >> 4)) & np.uint64(0x100F00F00F00F00F)
    v = (v ^ (v >> 8)) & np.uint64(0x1F0000FF0000FF)
    v = (v ^ (v >> 16)) & np.uint64(0x1F00000000FFFF)
    v = (v ^ (v >> 32)) & np.uint64(0x1FFFFF)
    return v


def encode_keys(cells: np.ndarray) -> np.ndarray:
    """Interleave integer cell coords (N,3) into shuffle keys (N,).

    Within each 3-bit group the x bit is most significant, then y, then z;
    groups are ordered root-first, so parent(key) == key >> 3.
    """
    cells = np.asarray(cells)
    return (
        (spread_bits(cells[..., 0]) << 2)
        | (spread_bits(cells[..., 1]) << 1)
        | spread_bits(cells[..., 2])
    )


def decode_keys(keys: np.ndarray) -> np.ndarray:
    """Recover (N,3) cell coords from shuffle keys."""
    keys = np.asarray(keys, dtype=np.uint64)
    out = np.empty(keys.shape + (3,), dtype=np.int64)
    out[..., 0] = compact_bits(keys >> 2)
    out[..., 1] = compact_bits(keys >> 1)
    out[..., 2] = compact_bits(keys)
    return out


# ---------------------------------------------------------------------------
# data types

@dataclass
class WorldBBox:
    """Axis-aligned world-space cube that maps onto the unit cube."""

    corner: np.ndarray  # (3,) float64, minimum corner
    side: float

    def world_to_unit(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.corner) / self.side

    def unit_to_world(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) * self.side + self.corner

    @staticmethod
    def unit() -> "WorldBBox":
        return WorldBBox(corner=np.zeros(3), side=1.0)


@dataclass
class PointCloud:
    """Positions (N,3) with linear RGB colors (N,3)."""

    positions: np.ndarray
    colors: np.ndarray

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass
class OctreeLevel:
    """One depth slice: parallel arrays sorted by key."""

    keys: np.ndarray      # (n,) uint64, strictly increasing
    split: np.ndarray     # (n,) uint8, 1 if the node has children
    features: np.ndarray  # (n,4) float64: r, g, b, sigma

    def __len__(self) -> int:
        return self.keys.shape[0]


@dataclass
class NodeHandle:
    """Reference to a node: depth, index into that level, and whether the
    queried point actually fell into empty space under a split ancestor."""

    depth: int
    index: int
    empty: bool = False


@dataclass
class LightingOctree:
    max_depth: int
    levels: list[OctreeLevel]
    bbox: WorldBBox = field(default_factory=WorldBBox.unit)
    # bumped whenever keys/split change so renderers can cache lookup tables
    version: int = 0

    @property
    def leaf_size(self) -> float:
        """Side length l_0 of a finest-depth voxel in unit coordinates."""
        return 2.0 ** -self.max_depth

    def node_count(self) -> int:
        return sum(len(lv) for lv in self.levels)

    def copy(self) -> "LightingOctree":
        return LightingOctree(
            max_depth=self.max_depth,
            levels=[
                OctreeLevel(lv.keys.copy(), lv.split.copy(), lv.features.copy())
                for lv in self.levels
            ],
            bbox=WorldBBox(self.bbox.corner.copy(), self.bbox.side),
            version=self.version,
        )


def _level_from_keys(keys: np.ndarray, split: int, n_feat: np.ndarray | None = None) -> OctreeLevel:
    n = keys.shape[0]
    feats = np.zeros((n, 4), dtype=np.float64) if n_feat is None else n_feat
    return OctreeLevel(
        keys=keys.astype(np.uint64),
        split=np.full(n, split, dtype=np.uint8),
        features=feats,
    )


def empty_octree(max_depth: int, bbox: WorldBBox | None = None) -> LightingOctree:
    """Root-only tree with zero features (renders to black, depth 0)."""
    levels = [_level_from_keys(np.zeros(1, dtype=np.uint64), 0)]
    levels += [
        _level_from_keys(np.empty(0, dtype=np.uint64), 0) for _ in range(max_depth)
    ]
    return LightingOctree(max_depth, levels, bbox or WorldBBox.unit())


def from_leaves(
    max_depth: int,
    leaf_keys: np.ndarray,
    colors: np.ndarray,
    sigma: np.ndarray | float,
    bbox: WorldBBox | None = None,
) -> LightingOctree:
    """Build a tree from finest-depth leaf keys; interiors get aggregated."""
    order = np.argsort(leaf_keys, kind="stable")
    keys = np.asarray(leaf_keys, dtype=np.uint64)[order]
    if keys.shape[0] == 0:
        raise EmptyCloud("no leaves supplied")
    if np.any(keys[1:] == keys[:-1]):
        raise ValueError("duplicate leaf keys")
    feats = np.zeros((keys.shape[0], 4), dtype=np.float64)
    feats[:, :3] = np.asarray(colors, dtype=np.float64)[order]
    feats[:, 3] = np.broadcast_to(np.asarray(sigma, dtype=np.float64), keys.shape)[order] \
        if np.ndim(sigma) else float(sigma)
    levels: list[OctreeLevel] = [_level_from_keys(keys, 0, feats)]
    up = keys
    for _ in range(max_depth):
        up = np.unique(up >> np.uint64(3))
        levels.append(_level_from_keys(up, 1))
    levels.reverse()
    tree = LightingOctree(max_depth, levels, bbox or WorldBBox.unit())
    return aggregate_mips(tree)


# ---------------------------------------------------------------------------
# construction from point clouds

def normalize_cloud(cloud: PointCloud, pad: float = 0.01) -> tuple[PointCloud, WorldBBox]:
    """Map a world-space cloud into the unit cube with symmetric padding.

    The cube is centered on the cloud per axis; its side is the largest
    extent inflated by 2*pad. Degenerate clouds (single point) get side 1.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot normalize an empty cloud")
    pos = np.asarray(cloud.positions, dtype=np.float64)
    lo = pos.min(axis=0)
    hi = pos.max(axis=0)
    extent = float((hi - lo).max())
    side = extent * (1.0 + 2.0 * pad) if extent > 0 else 1.0
    center = (lo + hi) / 2.0
    corner = center - side / 2.0
    bbox = WorldBBox(corner=corner, side=side)
    return PointCloud(bbox.world_to_unit(pos), np.asarray(cloud.colors, dtype=np.float64)), bbox


def build_octree(
    cloud: PointCloud,
    max_depth: int,
    sigma_surface: float | None = None,
    bbox: WorldBBox | None = None,
) -> LightingOctree:
    """Voxelize a unit-cube cloud at max_depth and grow the ancestor levels.

    Leaf color is the mean of the points that landed in the voxel; leaf
    sigma is sigma_surface (default 4 / l_0, optically thick at one voxel).
    Interior features are left zero; call aggregate_mips to fill them.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot build from an empty cloud")
    pos = np.asarray(cloud.positions, dtype=np.float64)
    if np.any(pos < 0.0) or np.any(pos > 1.0):
        bad = int(np.argmax(np.any((pos < 0.0) | (pos > 1.0), axis=1)))
        raise PointOutOfUnitCube(f"point {bad} at {pos[bad]} outside [0,1]^3")
    if sigma_surface is None:
        sigma_surface = 4.0 * 2.0 ** max_depth

    res = 2 ** max_depth
    cells = (np.minimum(pos, 1.0 - BOUNDARY_EPS) * res).astype(np.int64)
    raw = encode_keys(cells)
    keys, inverse = np.unique(raw, return_inverse=True)
    counts = np.bincount(inverse, minlength=keys.shape[0]).astype(np.float64)
    csum = np.zeros((keys.shape[0], 3), dtype=np.float64)
    np.add.at(csum, inverse, np.asarray(cloud.colors, dtype=np.float64))
    feats = np.zeros((keys.shape[0], 4), dtype=np.float64)
    feats[:, :3] = csum / counts[:, None]
    feats[:, 3] = sigma_surface

    levels: list[OctreeLevel] = [_level_from_keys(keys, 0, feats)]
    up = keys
    for _ in range(max_depth):
        up = np.unique(up >> np.uint64(3))
        levels.append(_level_from_keys(up, 1))
    levels.reverse()
    return LightingOctree(max_depth, levels, bbox or WorldBBox.unit())


# ---------------------------------------------------------------------------
# queries

def locate_many(
    tree: LightingOctree, pts: np.ndarray, depth: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized locate: for unit-cube points (N,3) find the node covering
    each at `depth`, falling back to the deepest existing ancestor.

    Returns (level, index, empty) int32/int64/bool arrays. level is the
    depth actually found; empty marks points under a split ancestor whose
    child chain stops before reaching them (true holes).
    """
    if not 0 <= depth <= tree.max_depth:
        raise ValueError(f"depth {depth} out of range 0..{tree.max_depth}")
    pts = np.asarray(pts, dtype=np.float64)
    n = pts.shape[0]
    res = 2 ** depth
    cells = (np.minimum(pts, 1.0 - BOUNDARY_EPS) * res).astype(np.int64)
    keys = encode_keys(cells)

    out_level = np.full(n, -1, dtype=np.int32)
    out_index = np.full(n, -1, dtype=np.int64)
    out_empty = np.zeros(n, dtype=bool)

    pending = np.arange(n)
    d = depth
    while pending.size:
        lvl = tree.levels[d]
        if len(lvl):
            pos = np.searchsorted(lvl.keys, keys)
            pos_c = np.minimum(pos, len(lvl) - 1)
            hit = lvl.keys[pos_c] == keys
        else:
            pos_c = np.zeros(pending.shape, dtype=np.int64)
            hit = np.zeros(pending.shape, dtype=bool)
        if np.any(hit):
            found = pending[hit]
            out_level[found] = d
            out_index[found] = pos_c[hit]
            if d != depth:
                # walk stopped above the target: a split node here means the
                # point sits in a hole; an unsplit node covers it as a leaf
                out_empty[found] = lvl.split[pos_c[hit]] == 1
        pending = pending[~hit]
        keys = keys[~hit] >> np.uint64(3)
        d -= 1
        if d < 0:
            break
    if pending.size:
        # no root even; caller handed us a rootless tree
        raise ValueError("octree has no root covering the unit cube")
    return out_level, out_index, out_empty


def locate(tree: LightingOctree, point: np.ndarray, depth: int) -> NodeHandle:
    """Find the node that covers a single unit-cube point at `depth`."""
    pt = np.asarray(point, dtype=np.float64)
    if np.any(pt < 0.0) or np.any(pt > 1.0):
        raise PointOutOfUnitCube(f"point {pt} outside [0,1]^3")
    lvl, idx, emp = locate_many(tree, pt[None, :], depth)
    return NodeHandle(depth=int(lvl[0]), index=int(idx[0]), empty=bool(emp[0]))


# ---------------------------------------------------------------------------
# mip aggregation

def aggregate_mips(tree: LightingOctree) -> LightingOctree:
    """Fill interior features bottom-up.

    Parent sigma is the mean of its children over all 8 slots (absent
    children count as empty), which preserves sum(sigma * volume) exactly.
    Parent color is the sigma-weighted mean of its children, or the plain
    mean when every present child has sigma == 0. Nodes without children
    keep their stored features.
    """
    for d in range(tree.max_depth - 1, -1, -1):
        child = tree.levels[d + 1]
        if len(child) == 0:
            continue
        parent = tree.levels[d]
        pk = child.keys >> np.uint64(3)
        starts = np.flatnonzero(np.r_[True, pk[1:] != pk[:-1]])
        group_keys = pk[starts]
        counts = np.diff(np.r_[starts, len(child)])
        gi = np.repeat(np.arange(starts.shape[0]), counts)
        slot = (child.keys & np.uint64(7)).astype(np.int64)
        # dense (parents, 8) slot matrices; absent children are exact zeros,
        # and summing slots left to right keeps the reduction sequential so
        # sigma * volume is conserved bitwise
        dsig = np.zeros((starts.shape[0], 8), dtype=np.float64)
        dcol = np.zeros((starts.shape[0], 8, 3), dtype=np.float64)
        dsig[gi, slot] = child.features[:, 3]
        dcol[gi, slot] = child.features[:, :3]
        sig_sum = _seqsum(dsig)
        col_sum = _seqsum(dcol)
        wcol_sum = _seqsum(dcol * dsig[:, :, None])
        counts_f = counts.astype(np.float64)
        sigma_p = sig_sum / 8.0
        pos = sig_sum > 0.0
        color_p = np.where(
            pos[:, None],
            wcol_sum / np.where(pos[:, None], sig_sum[:, None], 1.0),
            col_sum / counts_f[:, None],
        )
        idx = np.searchsorted(parent.keys, group_keys)
        parent.features[idx, :3] = color_p
        parent.features[idx, 3] = sigma_p
    return tree


def _seqsum(dense: np.ndarray) -> np.ndarray:
    """Sum axis 1 strictly left to right (numpy reductions are pairwise)."""
    acc = dense[:, 0].copy()
    for j in range(1, dense.shape[1]):
        acc += dense[:, j]
    return acc


# ---------------------------------------------------------------------------
# structure edits

def subdivide(tree: LightingOctree, handles: Iterable[NodeHandle | tuple[int, int]]) -> LightingOctree:
    """Materialize all 8 children of each given unsplit node.

    Children inherit the parent's features; parents get split=1. Handles
    must reference unsplit nodes above max_depth.
    """
    by_depth: dict[int, list[int]] = {}
    for h in handles:
        d, i = (h.depth, h.index) if isinstance(h, NodeHandle) else h
        if d >= tree.max_depth:
            raise ValueError(f"cannot subdivide depth {d} at max_depth {tree.max_depth}")
        if tree.levels[d].split[i]:
            raise ValueError(f"node depth={d} index={i} is already split")
        by_depth.setdefault(d, []).append(i)

    for d, idx_list in sorted(by_depth.items()):
        lvl = tree.levels[d]
        idx = np.unique(np.asarray(idx_list, dtype=np.int64))
        pkeys = lvl.keys[idx]
        ckeys = ((pkeys[:, None] << np.uint64(3)) | np.arange(8, dtype=np.uint64)).ravel()
        cfeat = np.repeat(lvl.features[idx], 8, axis=0)
        child = tree.levels[d + 1]
        keys = np.concatenate([child.keys, ckeys])
        split = np.concatenate([child.split, np.zeros(ckeys.shape[0], dtype=np.uint8)])
        feats = np.concatenate([child.features, cfeat], axis=0)
        order = np.argsort(keys, kind="stable")
        tree.levels[d + 1] = OctreeLevel(keys[order], split[order], feats[order])
        lvl.split[idx] = 1
    tree.version += 1
    return tree


def prune(tree: LightingOctree, sigma_min: float) -> LightingOctree:
    """Drop every subtree whose densities all fall below sigma_min.

    A node survives if its own sigma reaches the threshold or any
    descendant's does; the root always survives. Split flags and interior
    features are rebuilt afterwards.
    """
    keep: list[np.ndarray] = [np.zeros(len(lv), dtype=bool) for lv in tree.levels]
    child_any = np.zeros(0, dtype=bool)
    child_keys = np.empty(0, dtype=np.uint64)
    for d in range(tree.max_depth, -1, -1):
        lvl = tree.levels[d]
        k = lvl.features[:, 3] >= sigma_min
        if child_keys.size:
            kept_child_parents = np.unique(child_keys[child_any] >> np.uint64(3))
            k |= np.isin(lvl.keys, kept_child_parents, assume_unique=True)
        keep[d] = k
        child_any = k
        child_keys = lvl.keys
    keep[0][:] = True

    for d in range(tree.max_depth + 1):
        lvl = tree.levels[d]
        tree.levels[d] = OctreeLevel(
            lvl.keys[keep[d]], lvl.split[keep[d]], lvl.features[keep[d]]
        )
    for d in range(tree.max_depth):
        lvl = tree.levels[d]
        parents_with_kids = np.unique(tree.levels[d + 1].keys >> np.uint64(3))
        lvl.split = np.isin(lvl.keys, parents_with_kids, assume_unique=True).astype(np.uint8)
    if len(tree.levels[tree.max_depth]):
        tree.levels[tree.max_depth].split[:] = 0
    tree.version += 1
    return aggregate_mips(tree)


# ---------------------------------------------------------------------------
# diagnostics

def stats(tree: LightingOctree) -> dict:
    """Node counts, leaf count, serialized size, and dense-grid comparison."""
    per_level = [len(lv) for lv in tree.levels]
    leaves = int(sum(int(np.sum(lv.split == 0)) for lv in tree.levels))
    # header: magic(4) + version(4) + max_depth(4) + bbox(4*8)
    nbytes = 44 + sum(8 + n * (8 + 1 + 16) for n in per_level)
    res = 2 ** tree.max_depth
    dense = res ** 3 * 16  # 4 float32 features per cell
    return {
        "max_depth": tree.max_depth,
        "nodes_per_level": per_level,
        "total_nodes": int(sum(per_level)),
        "leaf_count": leaves,
        "finest_count": per_level[-1],
        "serialized_bytes": int(nbytes),
        "dense_bytes": int(dense),
        "compression_ratio": float(dense / nbytes),
    }


def check_invariants(tree: LightingOctree) -> None:
    """Assert structural invariants; test helper."""
    assert len(tree.levels) == tree.max_depth + 1
    assert len(tree.levels[0]) == 1 and tree.levels[0].keys[0] == 0
    for d, lvl in enumerate(tree.levels):
        assert lvl.keys.dtype == np.uint64
        assert np.all(lvl.keys[1:] > lvl.keys[:-1]), f"level {d} keys not sorted unique"
        assert lvl.keys.shape[0] == lvl.split.shape[0] == lvl.features.shape[0]
        if len(lvl):
            assert int(lvl.keys[-1]) < 8 ** d
        if d < tree.max_depth:
            child_parents = np.unique(tree.levels[d + 1].keys >> np.uint64(3))
            # every child has a parent marked split
            idx = np.searchsorted(lvl.keys, child_parents)
            assert np.all(idx < len(lvl)) and np.all(lvl.keys[idx] == child_parents)
            assert np.all(lvl.split[idx] == 1)
            # every split parent has at least one child
            split_keys = lvl.keys[lvl.split == 1]
            assert np.all(np.isin(split_keys, child_parents, assume_unique=True))
        else:
            assert np.all(lvl.split == 0)
