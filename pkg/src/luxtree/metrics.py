"""Scalar losses and image metrics for radiance fields and depth maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DepthMismatch, EmptyMask, NegativeInput, ShapeMismatch
from .octree import LightingOctree

_PROB_CLAMP = 1e-7
PSNR_CAP = 99.0


@dataclass
class LossWeights:
    """Relative weights of the radiance and depth terms."""

    lambda_li: float = 1.0
    lambda_ld: float = 1.0

    def __post_init__(self):
        if self.lambda_li < 0.0 or self.lambda_ld < 0.0:
            raise NegativeInput("loss weights must be >= 0")


@dataclass
class SCConfig:
    """Settings for the gradient-weighted probe comparison."""

    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha < 0.0:
            raise NegativeInput("alpha must be >= 0")


def log_l2(pred, gt) -> float:
    """Mean squared difference of log(x + 1) over all pixels and channels.

    Both images must be nonnegative; HDR values are compressed by the
    log1p encoding so bright regions do not dominate the average.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"image shapes differ: {pred.shape} vs {gt.shape}")
    if np.any(pred < 0.0) or np.any(gt < 0.0):
        raise NegativeInput("log-encoded L2 requires nonnegative values")
    d = np.log1p(pred) - np.log1p(gt)
    return float(np.mean(d * d))


def scale_invariant_l2(pred, gt, mask=None) -> float:
    """Variance of log(pred / gt) over the valid mask.

    Scaling pred by a positive constant shifts every log ratio equally and
    leaves the variance unchanged. The ratios are formed by division, so a
    power-of-two factor cancels bitwise and the result is exactly zero.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    if mask is None:
        mask = np.ones(pred.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape:
            raise ShapeMismatch(f"mask shape {mask.shape} vs {pred.shape}")
    p = pred[mask]
    q = gt[mask]
    if p.size == 0:
        raise EmptyMask("mask selects no pixels")
    if np.any(p <= 0.0) or np.any(q <= 0.0):
        raise NegativeInput("masked depths must be positive")
    g = np.log(p / q)
    # anchoring on the first ratio keeps a constant g at exactly zero
    h = g - g[0]
    v = float(np.mean(h * h) - np.mean(h) ** 2)
    return max(v, 0.0)


def _split_labels(keys: np.ndarray, gt_level) -> np.ndarray:
    """1.0 where the key exists in the reference level and is split there."""
    y = np.zeros(keys.shape[0], dtype=np.float64)
    if len(gt_level) == 0 or keys.size == 0:
        return y
    pos = np.searchsorted(gt_level.keys, keys)
    pos = np.minimum(pos, len(gt_level) - 1)
    hit = gt_level.keys[pos] == keys
    y[hit] = gt_level.split[pos[hit]].astype(np.float64)
    return y


def octree_bce(pred: LightingOctree, gt: LightingOctree, probs=None) -> float:
    """Structure loss: per-depth mean cross entropy of split probabilities.

    Nodes are aligned by their location key; a predicted node whose key is
    absent from the reference tree counts as "should not split". `probs`
    supplies one probability array per depth, aligned with pred's levels;
    when omitted, pred's own split flags are used as hard probabilities.
    """
    if pred.max_depth != gt.max_depth:
        raise DepthMismatch(f"max depth {pred.max_depth} vs {gt.max_depth}")
    if probs is None:
        probs = [lv.split.astype(np.float64) for lv in pred.levels]
    if len(probs) != len(pred.levels):
        raise ShapeMismatch("expected one probability array per depth")
    total = 0.0
    for d, lv in enumerate(pred.levels):
        if len(lv) == 0:
            continue
        p = np.asarray(probs[d], dtype=np.float64)
        if p.shape != (len(lv),):
            raise ShapeMismatch(f"probs[{d}] has shape {p.shape}, "
                                f"expected ({len(lv)},)")
        y = _split_labels(lv.keys, gt.levels[d])
        pc = np.clip(p, _PROB_CLAMP, 1.0 - _PROB_CLAMP)
        ce = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
        total += float(np.mean(ce))
    return total


def _grad_weight(depth: np.ndarray, alpha: float) -> np.ndarray:
    """exp(alpha * L1 norm of forward depth differences) per pixel.

    The horizontal difference wraps around the azimuth seam; the vertical
    difference is zero on the last row (nothing below the pole).
    """
    du = np.roll(depth, -1, axis=1) - depth
    dv = np.zeros_like(depth)
    dv[:-1, :] = depth[1:, :] - depth[:-1, :]
    return np.exp(alpha * (np.abs(du) + np.abs(dv)))


def sc_metric(pred, gt, gt_depth, cfg: SCConfig | None = None) -> float:
    """Mean absolute probe error re-weighted by local depth variation.

    Pixels near depth discontinuities receive exponentially larger weight,
    punishing lighting errors where spatial coherence matters most.
    """
    if cfg is None:
        cfg = SCConfig()
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    if pred.ndim == 3:
        pred = pred[None]
        gt = gt[None] if gt.ndim == 3 else gt
        gt_depth = gt_depth[None] if gt_depth.ndim == 2 else gt_depth
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"probe shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim != 4 or pred.shape[-1] != 3:
        raise ShapeMismatch(f"expected (N, H, W, 3) probes, got {pred.shape}")
    if gt_depth.shape != pred.shape[:3]:
        raise ShapeMismatch(f"depth shape {gt_depth.shape} does not match "
                            f"probes {pred.shape[:3]}")
    if pred.shape[0] < 1:
        raise ShapeMismatch("need at least one probe")
    err = np.abs(pred - gt)
    w = np.stack([_grad_weight(gt_depth[i], cfg.alpha)
                  for i in range(gt_depth.shape[0])])
    return float(np.mean(err * w[..., None]))


def psnr(pred, gt, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 for identical inputs."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"image shapes differ: {pred.shape} vs {gt.shape}")
    if peak <= 0.0:
        raise NegativeInput("peak must be positive")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP)
