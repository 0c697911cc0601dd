"""Differentiable cone tracing through the lighting octree.

Sampling follows a geometric schedule along each cone: the first step is c0
and every later step grows with the cone footprint, delta_n = c * s_{n-1} *
tan(theta). Each sample reads the mip level whose voxels match the local
footprint and composites front to back under emission-absorption:

    L = sum_n w_n * C_n * T_n * (1 - exp(-sigma_n * delta_n))

with T_n the transmittance accumulated before sample n and w_n either
delta_n / s_n ("paper" mode) or 1 ("unit" mode). Expected depth uses the
same weights-free sum D = sum_n T_n * a_n * s_n. The backward pass is
analytic (suffix sums over the same intermediates) and is validated against
central finite differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import Cone, ConeGrid
from .errors import DegenerateSchedule
from .octree import BOUNDARY_EPS, LightingOctree, encode_keys

_GROWTH_FLOOR = 1e-8   # below this, tan(theta)*c is treated as zero growth
_MAX_STEPS = 1_000_000


@dataclass
class MarchConfig:
    """Knobs for the cone marcher.

    c0 is the first step length; None means one finest voxel (l_0 of the
    octree being traced). growth is the footprint multiplier c. A non-None
    theta_override replaces every cone's own half-angle. Marching stops
    once transmittance drops below t_min_transmittance or the arc length
    exceeds s_max (unit-cube diagonal by default).
    """

    c0: float | None = None
    growth: float = 2.0
    theta_override: float | None = None
    t_min_transmittance: float = 1e-4
    s_max: float = math.sqrt(3.0)
    weight_mode: str = "paper"  # "paper": w = delta/s, "unit": w = 1

    def resolve_c0(self, tree: LightingOctree) -> float:
        return self.c0 if self.c0 is not None else tree.leaf_size


@dataclass
class SampleArrays:
    """Per-sample trace record (structure of arrays along the cone)."""

    s: np.ndarray              # arc length from the cone apex
    delta: np.ndarray          # step length
    level: np.ndarray          # octree depth the sample read (-1 if none)
    index: np.ndarray          # node index within that level (-1 if none)
    found: np.ndarray          # bool, sample hit a stored node
    sigma: np.ndarray
    color: np.ndarray          # (n,3)
    transmittance: np.ndarray  # T entering the sample
    alpha: np.ndarray          # 1 - exp(-sigma*delta)
    weight: np.ndarray

    def __len__(self) -> int:
        return self.s.shape[0]


@dataclass
class TraceResult:
    radiance: np.ndarray  # (3,)
    depth: float
    samples: SampleArrays


@dataclass
class GradientBuffer:
    """Per-node feature gradients, one array pair per octree level."""

    d_color: list[np.ndarray]
    d_sigma: list[np.ndarray]

    @staticmethod
    def zeros(tree: LightingOctree) -> "GradientBuffer":
        return GradientBuffer(
            d_color=[np.zeros((len(lv), 3)) for lv in tree.levels],
            d_sigma=[np.zeros(len(lv)) for lv in tree.levels],
        )

    def merge(self, other: "GradientBuffer") -> "GradientBuffer":
        for a, b in zip(self.d_color, other.d_color):
            a += b
        for a, b in zip(self.d_sigma, other.d_sigma):
            a += b
        return self


def sample_schedule(cfg: MarchConfig, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Arc lengths and step sizes for one cone, measured from the march start.

    s_0 = delta_0 = c0; afterwards delta_n = c * s_{n-1} * tan(theta), i.e.
    s_n = c0 * (1 + c*tan(theta))^n. Cones with negligible growth fall back
    to uniform steps of c0. Raises DegenerateSchedule when the uniform
    fallback would exceed a million steps.
    """
    if cfg.c0 is None:
        raise ValueError("cfg.c0 must be resolved before building a schedule")
    c0 = float(cfg.c0)
    if c0 <= 0:
        raise ValueError("c0 must be positive")
    g = cfg.growth * math.tan(theta)
    if g <= _GROWTH_FLOOR:
        n = int(math.floor(cfg.s_max / c0))
        if n > _MAX_STEPS:
            raise DegenerateSchedule(
                f"uniform schedule would need {n} steps (c0={c0}, s_max={cfg.s_max})"
            )
        s = c0 * np.arange(1, n + 1, dtype=np.float64)
        delta = np.full(n, c0)
        return s, delta
    n = int(math.floor(math.log(cfg.s_max / c0) / math.log1p(g))) if cfg.s_max >= c0 else -1
    ar = np.arange(0, n + 2, dtype=np.float64)
    s = c0 * np.power(1.0 + g, ar)
    s = s[s <= cfg.s_max]
    if s.size == 0:
        return s, s.copy()
    delta = np.empty_like(s)
    delta[0] = c0
    delta[1:] = np.diff(s)
    return s, delta


def _floor_log2(x: np.ndarray) -> np.ndarray:
    """floor(log2(x)) for positive normal floats via the exponent bits.

    Exact by construction, unlike floor(np.log2(x)) which can land on the
    wrong side of an integer for values a few ulp from a power of two.
    """
    bits = np.asarray(x, dtype=np.float64).view(np.int64)
    return (bits >> 52) - 1023


def select_depth(
    delta: np.ndarray, s: np.ndarray, theta: float, max_depth: int
) -> np.ndarray:
    """Mip depth whose voxel size matches the sample footprint.

    The footprint is the larger of the step length and the cone diameter
    2*s*tan(theta); each doubling over the leaf size l_0 moves one level up.
    """
    l0 = 2.0 ** -max_depth
    f = np.maximum(delta, 2.0 * s * math.tan(theta))
    d = max_depth - _floor_log2(f / l0)
    return np.clip(d, 0, max_depth).astype(np.int64)


def _cube_entry(
    apexes: np.ndarray, axes: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab test against the unit cube.

    Returns (t0, t_far, hit): march start distance (0 for apexes inside),
    exit distance, and whether the ray touches the cube at all.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / axes
        t1 = (0.0 - apexes) * inv
        t2 = (1.0 - apexes) * inv
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    # rays parallel to an axis never cross its slab planes
    parallel = axes == 0.0
    outside = (apexes < 0.0) | (apexes > 1.0)
    near = np.where(parallel, np.where(outside, np.inf, -np.inf), near)
    far = np.where(parallel, np.where(outside, -np.inf, np.inf), far)
    t_enter = near.max(axis=-1)
    t_exit = far.min(axis=-1)
    inside = np.all((apexes >= 0.0) & (apexes <= 1.0), axis=-1)
    hit = inside | ((t_enter <= t_exit) & (t_exit > 0.0))
    t0 = np.where(inside, 0.0, np.maximum(t_enter, 0.0))
    return np.where(hit, t0, 0.0), np.where(hit, t_exit, 0.0), hit


def _gather_features(
    tree: LightingOctree, level: np.ndarray, index: np.ndarray, found: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pick (sigma, color) for flat sample arrays; zeros where not found."""
    n = level.shape[0]
    sigma = np.zeros(n)
    color = np.zeros((n, 3))
    for lv in np.unique(level[found]):
        m = found & (level == lv)
        feats = tree.levels[lv].features[index[m]]
        color[m] = feats[:, :3]
        sigma[m] = feats[:, 3]
    return sigma, color


def _row_offsets(tree: LightingOctree) -> np.ndarray:
    """Start row of each level in the flattened node table; length L+1."""
    return np.concatenate([[0], np.cumsum([len(lv) for lv in tree.levels])]).astype(np.int64)


@dataclass
class _LocateLUT:
    """Dense per-depth tables resolving a query cell straight to a node row.

    cell_offset[d] locates depth d's block inside rows; rows[block + key]
    is the flat node-table row answering a depth-d locate (exact node or
    covering unsplit ancestor), or -1 for a hole under a split ancestor.
    """

    cell_offset: np.ndarray  # (max_depth+1,)
    rows: np.ndarray         # (sum of 8^d,) int32

# Dense tables get big fast; sum(8^d) for d<=7 is ~2.4M cells (12 MB).
_LUT_MAX_CELLS = 3_000_000


def _locate_lut(tree: LightingOctree) -> _LocateLUT | None:
    cache = getattr(tree, "_lut_cache", None)
    if cache is not None and cache[0] == tree.version:
        return cache[1]
    total = (8 ** (tree.max_depth + 1) - 1) // 7
    lut: _LocateLUT | None = None
    if total <= _LUT_MAX_CELLS:
        row_off = _row_offsets(tree)
        split_flat = np.concatenate([lv.split for lv in tree.levels])
        per_depth: list[np.ndarray] = []
        cur = np.full(1, -1, dtype=np.int32)
        if len(tree.levels[0]):
            cur[0] = 0
        per_depth.append(cur)
        for d in range(1, tree.max_depth + 1):
            prev = per_depth[-1]
            # a split ancestor leaves holes; an unsplit one covers children
            inherit = np.where((prev >= 0) & (split_flat[prev] == 1), -1, prev)
            cur = np.repeat(inherit, 8)
            lvl = tree.levels[d]
            if len(lvl):
                cur[lvl.keys.astype(np.int64)] = (
                    row_off[d] + np.arange(len(lvl), dtype=np.int64)
                ).astype(np.int32)
            per_depth.append(cur)
        cell_offset = np.concatenate(
            [[0], np.cumsum([a.shape[0] for a in per_depth])]
        )[:-1].astype(np.int64)
        lut = _LocateLUT(cell_offset=cell_offset, rows=np.concatenate(per_depth))
    tree._lut_cache = (tree.version, lut)  # type: ignore[attr-defined]
    return lut


def _resolve_rows(
    tree: LightingOctree,
    pos: np.ndarray,
    depth_sel: np.ndarray,
    inside: np.ndarray,
) -> np.ndarray:
    """Flat node-table row for every sample; -1 where outside or in a hole.

    pos (C,N,3), depth_sel (C,N), inside (C,N) -> rows (C,N) int64.
    """
    rows = np.full(depth_sel.shape, -1, dtype=np.int64)
    if not np.any(inside):
        return rows
    lut = _locate_lut(tree)
    if lut is not None:
        p = pos[inside]
        res = float(2 ** tree.max_depth)
        cells = (np.minimum(p, 1.0 - BOUNDARY_EPS) * res).astype(np.int64)
        key_fine = encode_keys(cells)
        shift = (3 * (tree.max_depth - depth_sel[inside])).astype(np.uint64)
        keyd = (key_fine >> shift).astype(np.int64)
        rows[inside] = lut.rows[lut.cell_offset[depth_sel[inside]] + keyd]
        return rows
    # fallback for trees too deep for a dense table: per-depth ancestor walk
    from .octree import locate_many

    row_off = _row_offsets(tree)
    for dv in np.unique(depth_sel[inside]):
        m = inside & (depth_sel == dv)
        lvl, idx, emp = locate_many(tree, pos[m], int(dv))
        ok = (lvl >= 0) & ~emp
        rows[m] = np.where(ok, row_off[np.maximum(lvl, 0)] + idx, -1)
    return rows


@dataclass
class _MarchState:
    """Everything the forward and backward passes share for one cone batch."""

    s: np.ndarray          # (N,) schedule from the march start
    delta: np.ndarray      # (N,)
    dist: np.ndarray       # (C,N) arc length from each apex
    rows: np.ndarray       # (C,N) flat node-table row, -1 where nothing read
    found: np.ndarray      # (C,N)
    sigma: np.ndarray      # (C,N)
    color: np.ndarray      # (C,N,3)
    tin: np.ndarray        # (C,N) transmittance entering each sample
    alpha: np.ndarray      # (C,N)
    alive: np.ndarray      # (C,N) transmittance still above threshold
    w: np.ndarray          # (C,N)
    radiance: np.ndarray   # (C,3)
    depth: np.ndarray      # (C,)


# samples per compaction block: cones whose transmittance died or which
# left the cube stop costing anything at the next block boundary
_BLOCK = 32


def _march(
    tree: LightingOctree, apexes: np.ndarray, axes: np.ndarray, theta: float,
    cfg: MarchConfig, want_state: bool = True,
) -> _MarchState:
    """Forward march for a batch of cones sharing one half-angle.

    Marches the schedule in fixed blocks, dropping cones that exhausted
    their transmittance budget or exited the cube. With want_state the
    per-sample intermediates are kept for the backward pass (never-visited
    samples read as not found with zero transmittance).
    """
    apexes = np.atleast_2d(np.asarray(apexes, dtype=np.float64))
    axes = np.atleast_2d(np.asarray(axes, dtype=np.float64))
    c = apexes.shape[0]
    theta_eff = cfg.theta_override if cfg.theta_override is not None else theta
    cfg_res = MarchConfig(
        c0=cfg.resolve_c0(tree), growth=cfg.growth,
        theta_override=cfg.theta_override,
        t_min_transmittance=cfg.t_min_transmittance,
        s_max=cfg.s_max, weight_mode=cfg.weight_mode,
    )
    if cfg.weight_mode not in ("paper", "unit"):
        raise ValueError(f"unknown weight_mode {cfg.weight_mode!r}")
    s, delta = sample_schedule(cfg_res, theta_eff)
    n = s.shape[0]
    radiance = np.zeros((c, 3))
    depth = np.zeros(c)
    if want_state or n == 0:
        z = np.zeros((c, n))
        state = _MarchState(
            s=s, delta=delta, dist=np.zeros(c)[:, None] + s[None, :],
            rows=np.full((c, n), -1, dtype=np.int64),
            found=np.zeros((c, n), dtype=bool), sigma=z.copy(),
            color=np.zeros((c, n, 3)), tin=z.copy(), alpha=z.copy(),
            alive=np.zeros((c, n), dtype=bool), w=z.copy(),
            radiance=radiance, depth=depth,
        )
    else:
        e = np.zeros((c, 0))
        state = _MarchState(
            s=s, delta=delta, dist=e, rows=e.astype(np.int64),
            found=e.astype(bool), sigma=e, color=np.zeros((c, 0, 3)),
            tin=e, alpha=e, alive=e.astype(bool), w=e,
            radiance=radiance, depth=depth,
        )
    if n == 0:
        return state

    t0, tfar, hit = _cube_entry(apexes, axes)
    feat = np.concatenate([lv.features for lv in tree.levels])
    thr = cfg.t_min_transmittance
    active = np.flatnonzero(hit)
    carry = np.zeros(c)  # optical depth accumulated ahead of each cone
    if want_state:
        state.dist = t0[:, None] + s[None, :]

    for lo in range(0, n, _BLOCK):
        if active.size == 0:
            break
        hi = min(lo + _BLOCK, n)
        sb, db = s[lo:hi], delta[lo:hi]
        # whole block beyond the cube exit: this cone is done
        active = active[t0[active] + sb[0] <= tfar[active]]
        if active.size == 0:
            break
        distb = t0[active][:, None] + sb[None, :]
        posb = apexes[active, None, :] + distb[:, :, None] * axes[active, None, :]
        insideb = np.all((posb >= 0.0) & (posb <= 1.0), axis=2)
        insideb &= distb <= tfar[active][:, None]
        dselb = select_depth(db[None, :], distb, theta_eff, tree.max_depth)
        rowsb = _resolve_rows(tree, posb, dselb, insideb)
        foundb = rowsb >= 0
        rr = rowsb[foundb]
        if rr.size == 0 and not want_state:
            continue  # empty space: nothing absorbed, nothing emitted
        sigb = np.zeros(rowsb.shape)
        colb = np.zeros(rowsb.shape + (3,))
        sigb[foundb] = feat[rr, 3]
        colb[foundb] = feat[rr, :3]

        taub = sigb * db[None, :]
        ecsb = np.empty_like(taub)
        ecsb[:, 0] = 0.0
        np.cumsum(taub[:, :-1], axis=1, out=ecsb[:, 1:])
        ecsb += carry[active][:, None]
        tinb = np.exp(-ecsb)
        aliveb = tinb >= thr if thr > 0 else np.ones_like(tinb, dtype=bool)
        alphab = -np.expm1(-taub)
        wb = np.ones_like(taub) if cfg.weight_mode == "unit" else db[None, :] / distb

        if rr.size:
            baseb = np.where(aliveb, wb * tinb * alphab, 0.0)
            radiance[active] += np.einsum("an,ank->ak", baseb, colb)
            depth[active] += (np.where(aliveb, tinb * alphab, 0.0) * distb).sum(axis=1)
            carry[active] += taub.sum(axis=1)

        if want_state:
            state.rows[active, lo:hi] = rowsb
            state.found[active, lo:hi] = foundb
            state.sigma[active, lo:hi] = sigb
            state.color[active, lo:hi] = colb
            state.tin[active, lo:hi] = tinb
            state.alpha[active, lo:hi] = alphab
            state.alive[active, lo:hi] = aliveb
            state.w[active, lo:hi] = wb

        if thr > 0 and hi < n:
            active = active[np.exp(-carry[active]) >= thr]
    return state


def _rows_to_level_index(
    tree: LightingOctree, rows: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Split flat node-table rows back into (level, index); -1 passes through."""
    off = _row_offsets(tree)
    level = np.searchsorted(off, rows, side="right") - 1
    level = np.where(rows >= 0, level, -1)
    index = np.where(rows >= 0, rows - off[np.maximum(level, 0)], -1)
    return level.astype(np.int64), index.astype(np.int64)


def trace_cone(tree: LightingOctree, cone: Cone, cfg: MarchConfig) -> TraceResult:
    """March one cone and return radiance, expected depth, and the samples."""
    st = _march(tree, cone.apex[None, :], cone.axis[None, :], cone.half_angle, cfg)
    level, index = _rows_to_level_index(tree, st.rows[0])
    samples = SampleArrays(
        s=st.dist[0], delta=st.delta, level=level, index=index,
        found=st.found[0], sigma=st.sigma[0], color=st.color[0],
        transmittance=st.tin[0], alpha=st.alpha[0], weight=st.w[0],
    )
    return TraceResult(radiance=st.radiance[0], depth=float(st.depth[0]), samples=samples)


def render_image(
    tree: LightingOctree, cones: ConeGrid, cfg: MarchConfig, chunk: int = 4096
) -> tuple[np.ndarray, np.ndarray]:
    """Trace every cone in the grid; returns (radiance, depth) shaped like
    the grid's image when it has one."""
    n = len(cones)
    theta = cones.half_angle
    rad = np.empty((n, 3))
    dep = np.empty(n)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        st = _march(
            tree, cones.apexes[lo:hi], cones.axes[lo:hi], theta, cfg,
            want_state=False,
        )
        rad[lo:hi] = st.radiance
        dep[lo:hi] = st.depth
    if cones.image_shape is not None:
        h, wdt = cones.image_shape
        return rad.reshape(h, wdt, 3), dep.reshape(h, wdt)
    return rad, dep


def _suffix_exclusive(x: np.ndarray, axis: int = 1) -> np.ndarray:
    """sum over samples after n along the given axis."""
    rev = np.flip(x, axis=axis)
    cs = np.cumsum(rev, axis=axis)
    return np.flip(cs, axis=axis) - x


def march_batch(tree: LightingOctree, apexes: np.ndarray, axes: np.ndarray,
                theta: float, cfg: MarchConfig) -> _MarchState:
    """Forward-march a cone batch keeping per-sample state.

    The state carries .radiance (C,3) and .depth (C,) and can be handed to
    backward_batch to skip the recomputed forward pass.
    """
    return _march(tree, apexes, axes, theta, cfg)


def backward_batch(
    tree: LightingOctree,
    apexes: np.ndarray,
    axes: np.ndarray,
    theta: float,
    cfg: MarchConfig,
    dl_drad: np.ndarray,
    dl_ddepth: np.ndarray,
    buf: GradientBuffer,
    state: _MarchState | None = None,
) -> GradientBuffer:
    """Accumulate d(loss)/d(features) into buf for a batch of cones.

    dl_drad (C,3) and dl_ddepth (C,) seed the chain rule at the outputs.
    Scatter into the per-level buffers uses np.add.at in array order, so
    results are deterministic for a fixed batch. Passing the state from
    march_batch over the same cones skips the internal forward pass.
    """
    st = state if state is not None else _march(tree, apexes, axes, theta, cfg)
    if st.s.shape[0] == 0:
        return buf
    dl_drad = np.atleast_2d(np.asarray(dl_drad, dtype=np.float64))
    dl_ddepth = np.atleast_1d(np.asarray(dl_ddepth, dtype=np.float64))

    delta = st.delta[None, :]
    live = st.alive
    base = np.where(live, st.w * st.tin * st.alpha, 0.0)           # (C,N)
    e = np.exp(-st.sigma * delta)                                   # (C,N)

    # d radiance / d color is diagonal per channel
    dcol = dl_drad[:, None, :] * base[:, :, None]                   # (C,N,3)

    contrib = base[:, :, None] * st.color                           # (C,N,3)
    srgb = _suffix_exclusive(contrib, axis=1)
    direct_rgb = np.where(live, st.w * st.tin * e, 0.0)[:, :, None] * delta[:, :, None] * st.color
    dsig_rgb = np.einsum(
        "ck,cnk->cn", dl_drad, direct_rgb - delta[:, :, None] * srgb
    )

    dterm = np.where(live, st.tin * st.alpha, 0.0) * st.dist        # (C,N)
    sdep = _suffix_exclusive(dterm)
    direct_d = np.where(live, st.tin * e, 0.0) * delta * st.dist
    dsig_dep = dl_ddepth[:, None] * (direct_d - delta * sdep)

    dsig = dsig_rgb + dsig_dep
    off = _row_offsets(tree)
    flat_col = np.zeros((off[-1], 3))
    flat_sig = np.zeros(off[-1])
    rows = st.rows[st.found]
    np.add.at(flat_col, rows, dcol[st.found])
    np.add.at(flat_sig, rows, dsig[st.found])
    for lv in range(len(tree.levels)):
        buf.d_color[lv] += flat_col[off[lv]:off[lv + 1]]
        buf.d_sigma[lv] += flat_sig[off[lv]:off[lv + 1]]
    return buf


def backward(
    tree: LightingOctree,
    cone: Cone,
    cfg: MarchConfig,
    dl_drad: np.ndarray,
    dl_ddepth: float = 0.0,
    buf: GradientBuffer | None = None,
) -> GradientBuffer:
    """Single-cone gradient accumulation; see backward_batch."""
    if buf is None:
        buf = GradientBuffer.zeros(tree)
    return backward_batch(
        tree, cone.apex[None, :], cone.axis[None, :], cone.half_angle, cfg,
        np.asarray(dl_drad, dtype=np.float64)[None, :],
        np.asarray([dl_ddepth], dtype=np.float64), buf,
    )


def trace_cone_oracle(
    tree: LightingOctree,
    cone: Cone,
    step: float | None = None,
    s_max: float = math.sqrt(3.0),
) -> np.ndarray:
    """Reference marcher: fixed step (default half a leaf), finest depth
    only, unit weights, sequential transmittance. Returns radiance (3,)."""
    from .octree import locate_many

    step = step if step is not None else tree.leaf_size / 2.0
    apex = np.asarray(cone.apex, dtype=np.float64)
    axis = np.asarray(cone.axis, dtype=np.float64)
    t0, tfar, hit = _cube_entry(apex[None, :], axis[None, :])
    if not hit[0]:
        return np.zeros(3)
    n = int(math.floor(s_max / step))
    s = step * np.arange(1, n + 1)
    dist = t0[0] + s
    pos = apex[None, :] + dist[:, None] * axis[None, :]
    inside = np.all((pos >= 0.0) & (pos <= 1.0), axis=1) & (dist <= tfar[0])
    lvl = np.full(n, -1, dtype=np.int64)
    idx = np.full(n, -1, dtype=np.int64)
    emp = np.zeros(n, dtype=bool)
    lvl[inside], idx[inside], emp[inside] = locate_many(tree, pos[inside], tree.max_depth)
    usable = inside & (lvl >= 0) & ~emp
    sigma, color = _gather_features(tree, lvl, idx, usable)
    out = np.zeros(3)
    t = 1.0
    for i in range(n):
        if not usable[i]:
            continue
        a = 1.0 - math.exp(-sigma[i] * step)
        out += color[i] * (t * a)
        t *= math.exp(-sigma[i] * step)
    return out
