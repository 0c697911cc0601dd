"""Inverse rendering: fit octree RGBA features to multi-view panoramas.

The optimizer treats every stored node feature (all depths) as a free
parameter, renders sampled pixels through the cone marcher, and descends
the analytic gradient with an adaptive-moment update. Structure is refined
coarse-to-fine by subdividing the nodes that accumulate the most density
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraPose, ConeGrid, panorama_cones
from .errors import DivergenceDetected, NoViews, ShapeMismatch
from .metrics import LossWeights, SCConfig, log_l2, psnr, sc_metric
from .octree import LightingOctree, aggregate_mips, subdivide
from .renderer import (GradientBuffer, MarchConfig, backward_batch,
                       march_batch, render_image)

_DIVERGENCE_FACTOR = 1e3
_AGGREGATE_EVERY = 10


@dataclass
class View:
    """One training view: HDR panorama, world-scale depth panorama, pose."""

    pano: np.ndarray   # (H,W,3) linear radiance
    depth: np.ndarray  # (H,W) distance from the camera center, world units
    pose: CameraPose

    def __post_init__(self):
        self.pano = np.asarray(self.pano, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.pano.ndim != 3 or self.pano.shape[2] != 3:
            raise ShapeMismatch(f"panorama wants (H,W,3), got {self.pano.shape}")
        if self.depth.shape != self.pano.shape[:2]:
            raise ShapeMismatch(f"depth {self.depth.shape} does not match "
                                f"panorama {self.pano.shape[:2]}")


@dataclass
class FitConfig:
    iterations: int = 500
    lr_color: float = 1e-2
    lr_sigma: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    refine_depths: tuple[int, ...] = (150, 300)
    refine_fraction: float = 0.1
    batch_fraction: float = 0.25
    seed: int = 0
    march: MarchConfig = field(
        default_factory=lambda: MarchConfig(weight_mode="unit"))

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr_color <= 0.0 or self.lr_sigma <= 0.0:
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.batch_fraction <= 1.0:
            raise ValueError("batch_fraction must be in (0, 1]")
        if not 0.0 < self.refine_fraction <= 1.0:
            raise ValueError("refine_fraction must be in (0, 1]")


@dataclass
class FitState:
    """Mutable optimizer state; buffers stay congruent with the octree."""

    octree: LightingOctree
    m: GradientBuffer
    v: GradientBuffer
    step: int
    loss_history: list[float]
    seed: int


def _remap_by_key(old_keys: list[np.ndarray], tree: LightingOctree,
                  buf: GradientBuffer) -> GradientBuffer:
    """Carry per-node arrays across a subdivision; new nodes start at zero."""
    out = GradientBuffer.zeros(tree)
    for d, keys in enumerate(old_keys):
        if keys.size == 0:
            continue
        pos = np.searchsorted(tree.levels[d].keys, keys)
        out.d_color[d][pos] = buf.d_color[d]
        out.d_sigma[d][pos] = buf.d_sigma[d]
    return out


def _refine(state: FitState, acc: list[np.ndarray],
            fraction: float) -> list[np.ndarray]:
    """Subdivide the top fraction of unsplit nodes by accumulated score."""
    tree = state.octree
    cand: list[tuple[float, int, int]] = []
    for d in range(tree.max_depth):
        lv = tree.levels[d]
        for i in np.flatnonzero(lv.split == 0):
            cand.append((float(acc[d][i]), d, int(i)))
    if not cand:
        return acc
    cand.sort(key=lambda t: (-t[0], t[1], t[2]))
    k = max(1, int(fraction * len(cand)))
    handles = [(d, i) for _, d, i in cand[:k]]

    old_keys = [lv.keys.copy() for lv in tree.levels]
    subdivide(tree, handles)
    state.m = _remap_by_key(old_keys, tree, state.m)
    state.v = _remap_by_key(old_keys, tree, state.v)
    # gradient accumulation restarts after every structure change
    return [np.zeros(len(lv)) for lv in tree.levels]


def _adam_step(state: FitState, grad: GradientBuffer, cfg: FitConfig) -> None:
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for d, lv in enumerate(state.octree.levels):
        if len(lv) == 0:
            continue
        for g, m, v, lr, sl in (
            (grad.d_color[d], state.m.d_color[d], state.v.d_color[d],
             cfg.lr_color, np.s_[:, :3]),
            (grad.d_sigma[d], state.m.d_sigma[d], state.v.d_sigma[d],
             cfg.lr_sigma, np.s_[:, 3]),
        ):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            step = lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
            lv.features[sl] -= step
        np.maximum(lv.features, 0.0, out=lv.features)


def _pack_views(tree: LightingOctree, views: list[View]):
    """Per-view cone bundles in unit-cube coordinates plus flat GT arrays."""
    packs = []
    for vw in views:
        h, w = vw.depth.shape
        grid = panorama_cones(w, h, vw.pose)
        packs.append({
            "apexes": tree.bbox.world_to_unit(grid.apexes),
            "axes": grid.axes,
            "theta": grid.half_angle,
            "gt_rad": vw.pano.reshape(-1, 3),
            "gt_dep": vw.depth.reshape(-1),
            "n": h * w,
        })
    return packs


def fit(initial: LightingOctree, views: list[View],
        cfg: FitConfig | None = None) -> tuple[LightingOctree, list[float]]:
    """Optimize a copy of the initial octree against the views.

    Returns the fitted octree and the per-iteration batch loss history.
    Raises DivergenceDetected when the loss exceeds 1000x its initial value.
    """
    if cfg is None:
        cfg = FitConfig()
    views = list(views)
    if not views:
        raise NoViews("fitting requires at least one view")
    tree = initial.copy()
    side = tree.bbox.side
    rng = np.random.default_rng(cfg.seed)
    lam_li, lam_ld = cfg.weights.lambda_li, cfg.weights.lambda_ld

    packs = _pack_views(tree, views)
    state = FitState(tree, GradientBuffer.zeros(tree),
                     GradientBuffer.zeros(tree), 0, [], cfg.seed)
    acc = [np.zeros(len(lv)) for lv in tree.levels]
    initial_loss = None

    for it in range(1, cfg.iterations + 1):
        batches = []
        for p in packs:
            k = max(1, int(round(cfg.batch_fraction * p["n"])))
            if k < p["n"]:
                idx = rng.choice(p["n"], size=k, replace=False)
            else:
                idx = np.arange(p["n"])
            st = march_batch(tree, p["apexes"][idx], p["axes"][idx],
                             p["theta"], cfg.march)
            batches.append((p, idx, st))

        total = sum(idx.shape[0] for _, idx, _ in batches)
        ssr = 0.0
        ssd = 0.0
        seeds = []
        for p, idx, st in batches:
            depth_w = st.depth * side
            res_r = np.log1p(st.radiance) - np.log1p(p["gt_rad"][idx])
            res_d = np.log1p(depth_w) - np.log1p(p["gt_dep"][idx])
            ssr += float(np.sum(res_r * res_r))
            ssd += float(np.sum(res_d * res_d))
            dl_drad = lam_li * 2.0 * res_r / ((st.radiance + 1.0)
                                              * (total * 3.0))
            dl_ddep = lam_ld * 2.0 * res_d / ((depth_w + 1.0) * total) * side
            seeds.append((dl_drad, dl_ddep))
        loss = lam_li * ssr / (total * 3.0) + lam_ld * ssd / total

        if not np.isfinite(loss):
            raise DivergenceDetected(f"non-finite loss at iteration {it}")
        if initial_loss is None:
            initial_loss = max(loss, 1e-12)
        elif loss > _DIVERGENCE_FACTOR * initial_loss:
            raise DivergenceDetected(
                f"loss {loss:.3e} exceeded {_DIVERGENCE_FACTOR:g}x the "
                f"initial {initial_loss:.3e} at iteration {it}")
        state.loss_history.append(loss)

        grad = GradientBuffer.zeros(tree)
        for (p, idx, st), (dl_drad, dl_ddep) in zip(batches, seeds):
            backward_batch(tree, p["apexes"][idx], p["axes"][idx], p["theta"],
                           cfg.march, dl_drad, dl_ddep, grad, state=st)
        for d in range(len(acc)):
            acc[d] += np.abs(grad.d_sigma[d]) * 8.0 ** (-d)

        _adam_step(state, grad, cfg)

        if it % _AGGREGATE_EVERY == 0:
            aggregate_mips(tree)
        if it in cfg.refine_depths:
            acc = _refine(state, acc, cfg.refine_fraction)

    return tree, state.loss_history


def evaluate(octree: LightingOctree, views: list[View],
             cfg: FitConfig | None = None,
             sc_cfg: SCConfig | None = None) -> dict:
    """Render the given views and score them.

    PSNR is computed in the log1p domain with the peak taken from the GT,
    so HDR panoramas compare on the same scale the loss optimizes.
    """
    if cfg is None:
        cfg = FitConfig()
    views = list(views)
    if not views:
        raise NoViews("evaluation requires at least one view")
    preds, gts, deps = [], [], []
    for vw in views:
        h, w = vw.depth.shape
        grid = panorama_cones(w, h, vw.pose)
        unit = ConeGrid(octree.bbox.world_to_unit(grid.apexes), grid.axes,
                        grid.half_angle, grid.image_shape)
        rad, _ = render_image(octree, unit, cfg.march)
        preds.append(rad)
        gts.append(vw.pano)
        deps.append(vw.depth)
    pred = np.stack(preds)
    gt = np.stack(gts)
    dep = np.stack(deps)
    lp, lg = np.log1p(pred), np.log1p(gt)
    peak = max(float(lg.max()), 1e-9)
    return {
        "psnr": float(psnr(lp, lg, peak)),
        "log_l2": float(log_l2(pred, gt)),
        "sc_metric": float(sc_metric(pred, gt, dep, sc_cfg or SCConfig())),
    }
