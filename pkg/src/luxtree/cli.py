"""Command-line surface: build, render, fit, eval, insert, bench.

Exit codes: 0 success, 2 bad arguments or bad input values, 3 file I/O
problems, 4 numerical failures (divergence, degenerate schedules, a bench
sparsity check that does not hold).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import fitter, formats, insertion, octree, scenes
from .camera import CameraPose, ConeGrid, Intrinsics, backproject, \
    panorama_cones, perspective_cones
from .errors import BadMagic, DegenerateSchedule, DivergenceDetected, \
    NoViews, ToolkitError, UnsupportedEndianness, UnsupportedVersion
from .metrics import LossWeights, SCConfig
from .renderer import MarchConfig, render_image, sample_schedule

EXIT_OK = 0
EXIT_ARGS = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

LEAF_RATIO_LIMIT = 4.5


# ----------------------------------------------------------------- helpers

def _read_image(path) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        return formats.read_pfm(path)
    if suffix == ".png":
        return formats.read_png(path)
    raise ValueError(f"unsupported image format '{suffix}' (use .pfm or .png)")


def _read_depth(path) -> np.ndarray:
    depth = formats.read_pfm(path)
    if depth.ndim == 3:
        depth = depth[..., 0]
    return depth


def _read_intrinsics(path) -> tuple[Intrinsics, CameraPose | None]:
    """JSON with fx/fy/cx/cy/width/height and an optional cam_to_world."""
    with open(path, "r", encoding="utf-8") as f:
        d = json.load(f)
    try:
        intr = Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]),
                          float(d["cy"]), int(d["width"]), int(d["height"]))
    except KeyError as e:
        raise ValueError(f"intrinsics file {path} missing key {e}") from e
    pose = None
    if "cam_to_world" in d:
        m = np.asarray(d["cam_to_world"], dtype=np.float64).reshape(4, 4)
        pose = CameraPose.from_matrix(m)
    return intr, pose


def _parse_triple(text: str) -> np.ndarray:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated values, got '{text}'")
    return np.asarray(parts)


def _load_views(dirpath) -> tuple[list[fitter.View], list[Path]]:
    """Paired pano_XXX.pfm / depth_XXX.pfm / pose_XXX.json under one dir."""
    root = Path(dirpath)
    panos = sorted(root.glob("pano_*.pfm"))
    if not panos:
        raise NoViews(f"no pano_*.pfm files under {root}")
    views: list[fitter.View] = []
    files: list[Path] = []
    for pano_path in panos:
        tag = pano_path.stem.split("_", 1)[1]
        depth_path = root / f"depth_{tag}.pfm"
        pose_path = root / f"pose_{tag}.json"
        for needed in (depth_path, pose_path):
            if not needed.exists():
                raise FileNotFoundError(f"view {tag}: missing {needed}")
        pose, _ = formats.read_pose(pose_path)
        views.append(fitter.View(formats.read_pfm(pano_path),
                                 _read_depth(depth_path), pose))
        files += [pano_path, depth_path, pose_path]
    return views, files


def _digests(paths) -> dict:
    return {Path(p).name: formats.file_digest(p) for p in paths}


def _march_from_dict(d: dict) -> MarchConfig:
    cfg = MarchConfig(
        c0=None if d.get("c0") is None else float(d["c0"]),
        growth=float(d.get("growth", 2.0)),
        theta_override=d.get("theta_override"),
        t_min_transmittance=float(d.get("t_min_transmittance", 1e-4)),
        weight_mode=str(d.get("weight_mode", "unit")),
    )
    if cfg.weight_mode not in ("paper", "unit"):
        raise ValueError(f"weight_mode must be paper or unit, got "
                         f"'{cfg.weight_mode}'")
    return cfg


_FIT_SCALARS = {
    "iterations": int, "lr_color": float, "lr_sigma": float,
    "beta1": float, "beta2": float, "eps": float,
    "refine_fraction": float, "batch_fraction": float, "seed": int,
}
_MARCH_KEYS = ("c0", "growth", "theta_override", "t_min_transmittance",
               "weight_mode")


def _fit_config(raw: dict, seed_override: int | None = None) -> fitter.FitConfig:
    d = dict(raw)
    weights = LossWeights(float(d.pop("lambda_li", 1.0)),
                          float(d.pop("lambda_ld", 1.0)))
    march_d = dict(d.pop("march", {}))
    for key in _MARCH_KEYS:
        if key in d:
            march_d[key] = d.pop(key)
    kw: dict = {}
    for key, cast in _FIT_SCALARS.items():
        if key in d:
            kw[key] = cast(d.pop(key))
    if "refine_depths" in d:
        kw["refine_depths"] = tuple(int(x) for x in d.pop("refine_depths"))
    if d:
        raise ValueError(f"unknown fit config keys: {sorted(d)}")
    if seed_override is not None:
        kw["seed"] = seed_override
    return fitter.FitConfig(weights=weights, march=_march_from_dict(march_d),
                            **kw)


def _config_echo(cfg: fitter.FitConfig) -> dict:
    return {
        "iterations": cfg.iterations,
        "lr_color": cfg.lr_color,
        "lr_sigma": cfg.lr_sigma,
        "beta1": cfg.beta1,
        "beta2": cfg.beta2,
        "eps": cfg.eps,
        "lambda_li": cfg.weights.lambda_li,
        "lambda_ld": cfg.weights.lambda_ld,
        "refine_depths": list(cfg.refine_depths),
        "refine_fraction": cfg.refine_fraction,
        "batch_fraction": cfg.batch_fraction,
        "seed": cfg.seed,
        "march": {
            "c0": cfg.march.c0,
            "growth": cfg.march.growth,
            "theta_override": cfg.march.theta_override,
            "t_min_transmittance": cfg.march.t_min_transmittance,
            "weight_mode": cfg.march.weight_mode,
        },
    }


def _world_grid_to_unit(tree, grid: ConeGrid) -> ConeGrid:
    return ConeGrid(tree.bbox.world_to_unit(grid.apexes), grid.axes,
                    grid.half_angle, grid.image_shape)


# ---------------------------------------------------------------- commands

def cmd_build(args) -> int:
    rgb = _read_image(args.rgb)
    depth = _read_depth(args.depth)
    intr, cam_pose = _read_intrinsics(args.intrinsics)
    if args.pose is not None:
        cam_pose, _ = formats.read_pose(args.pose)
    cloud = backproject(depth, rgb, intr)
    pos = cloud.positions
    if cam_pose is not None:
        pos = pos @ cam_pose.rotation.T + cam_pose.translation
        cloud = octree.PointCloud(pos, cloud.colors)
    if args.bbox is not None:
        parts = [float(x) for x in args.bbox.split(",")]
        if len(parts) != 4:
            raise ValueError("--bbox wants corner_x,corner_y,corner_z,side")
        bbox = octree.WorldBBox(np.asarray(parts[:3]), parts[3])
        unit = octree.PointCloud(bbox.world_to_unit(pos), cloud.colors)
    else:
        unit, bbox = octree.normalize_cloud(cloud)
    tree = octree.build_octree(unit, args.max_depth, args.sigma, bbox=bbox)
    tree = octree.aggregate_mips(tree)
    formats.write_octree(args.out, tree)
    st = octree.stats(tree)
    print(f"built depth-{tree.max_depth} octree: {st['total_nodes']} nodes, "
          f"{st['leaf_count']} leaves, {st['serialized_bytes']} bytes "
          f"-> {args.out}")
    return EXIT_OK


def cmd_render(args) -> int:
    tree = formats.read_octree(args.octree)
    pose = CameraPose.identity()
    intr = None
    if args.pose is not None:
        pose, intr = formats.read_pose(args.pose)
    if args.mode == "persp":
        if intr is None:
            raise ValueError("perspective mode needs fx/fy/cx/cy in the "
                             "pose file")
        grid = perspective_cones(intr, pose, half_angle=args.cone_angle)
    else:
        grid = panorama_cones(args.width, args.height, pose,
                              half_angle=args.cone_angle)
    cfg = MarchConfig(c0=args.c0, growth=args.growth,
                      weight_mode=args.weight_mode)
    rad, dep = render_image(tree, _world_grid_to_unit(tree, grid), cfg)
    out_img = dep * tree.bbox.side if args.mode == "depth" else rad
    suffix = Path(args.out).suffix.lower()
    if suffix == ".png":
        formats.write_png(args.out, out_img, exposure=args.exposure)
    else:
        formats.write_pfm(args.out, out_img)
    print(f"rendered {args.mode} {out_img.shape[1]}x{out_img.shape[0]} "
          f"-> {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    init = formats.read_octree(args.init)
    views, view_files = _load_views(args.views)
    raw = {}
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as f:
            raw = json.load(f)
    cfg = _fit_config(raw, seed_override=args.seed)
    fitted, history = fitter.fit(init, views, cfg)
    formats.write_octree(args.out, fitted)
    sidecar = {
        "iterations": cfg.iterations,
        "seed": cfg.seed,
        "final_loss": history[-1],
        "loss_history": history,
        "config": _config_echo(cfg),
        "inputs": _digests([args.init] + view_files),
    }
    with open(str(args.out) + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"fit {cfg.iterations} iterations on {len(views)} views, "
          f"final loss {history[-1]:.6g} -> {args.out}")
    return EXIT_OK


_METRIC_KEYS = {"psnr": "psnr", "logl2": "log_l2", "sc": "sc_metric"}


def cmd_eval(args) -> int:
    tree = formats.read_octree(args.pred)
    views, view_files = _load_views(args.views)
    scores = fitter.evaluate(tree, views, sc_cfg=SCConfig(alpha=args.alpha))
    key = _METRIC_KEYS[args.metric]
    value = scores[key]
    report = formats.MetricReport(
        name=key,
        value=value,
        config={"metric": args.metric, "alpha": args.alpha,
                "views": len(views)},
        inputs=_digests([args.pred] + view_files),
    )
    if args.report is not None:
        report.save(args.report)
    print(f"{key} = {value:.6g}")
    return EXIT_OK


def cmd_insert(args) -> int:
    image = _read_image(args.image)
    depth = _read_depth(args.depth)
    intr, _ = _read_intrinsics(args.intrinsics)
    tree = formats.read_octree(args.octree)
    vertices, faces = formats.read_obj(args.mesh)
    mesh = insertion.TriangleMesh(vertices, faces)
    transform = None
    if args.transform is not None:
        transform = formats.read_transform(args.transform)
    material = insertion.Material(args.material, _parse_triple(args.albedo),
                                  roughness=args.roughness)
    hdr, _ = insertion.insert_render(image, depth, intr, mesh, material,
                                     tree, transform=transform)
    suffix = Path(args.out).suffix.lower()
    if suffix == ".png":
        formats.write_png(args.out, hdr, exposure=args.exposure)
    else:
        formats.write_pfm(args.out, hdr)
    print(f"composited {len(faces)} triangles -> {args.out}")
    return EXIT_OK


_SCENES = {"plane": scenes.plane_octree, "box": scenes.box_octree,
           "shell": scenes.shell_octree}


def _octree_memory(tree) -> int:
    return sum(lv.keys.nbytes + lv.split.nbytes + lv.features.nbytes
               for lv in tree.levels)


def _estimate_render_flops(tree, n_cones: int, theta: float,
                           cfg: MarchConfig) -> int:
    """Back-of-envelope cost: steps/cone x (key descent + compositing)."""
    resolved = MarchConfig(c0=cfg.resolve_c0(tree), growth=cfg.growth,
                           weight_mode=cfg.weight_mode)
    n_steps = len(sample_schedule(resolved, theta)[0])
    per_sample = 12 * tree.max_depth + 30
    return int(n_cones) * n_steps * per_sample


def cmd_bench(args) -> int:
    depths = [int(x) for x in args.depths.split(",")]
    if not depths or any(d < 1 for d in depths):
        raise ValueError(f"bad depth list '{args.depths}'")
    builder = _SCENES[args.scene]
    cfg = MarchConfig()
    w, h = args.render_width, args.render_height
    grid = panorama_cones(w, h)
    rows = []
    for d in depths:
        t0 = time.perf_counter()
        tree = builder(d)
        build_s = time.perf_counter() - t0
        st = octree.stats(tree)
        # camera at the unit-cube center so every scene stays in view
        unit = ConeGrid(np.full_like(grid.apexes, 0.5), grid.axes,
                        grid.half_angle, grid.image_shape)
        t0 = time.perf_counter()
        render_image(tree, unit, cfg)
        render_s = time.perf_counter() - t0
        rows.append({
            "depth": d,
            "nodes_per_level": st["nodes_per_level"],
            "total_nodes": st["total_nodes"],
            "leaf_count": st["leaf_count"],
            "serialized_bytes": st["serialized_bytes"],
            "octree_memory_bytes": _octree_memory(tree),
            "dense_cells": 8 ** d,
            "dense_bytes": st["dense_bytes"],
            "compression_ratio": st["compression_ratio"],
            "build_seconds": build_s,
            "render_seconds": render_s,
            "render_pixels": w * h,
            "estimated_render_flops": _estimate_render_flops(
                tree, w * h, grid.half_angle, cfg),
        })
        print(f"{args.scene} d={d}: {st['leaf_count']} leaves, "
              f"{st['serialized_bytes']} bytes "
              f"({st['compression_ratio']:.1f}x vs dense), "
              f"render {w}x{h} in {render_s:.3f}s")
    ratios = {}
    for prev, cur in zip(rows, rows[1:]):
        label = f"{cur['depth']}/{prev['depth']}"
        ratios[label] = cur["leaf_count"] / prev["leaf_count"]
    report = {
        "scene": args.scene,
        "rows": rows,
        "leaf_ratios": ratios,
        "leaf_ratio_limit": LEAF_RATIO_LIMIT,
        "dense_ratio": 8.0,
    }
    if args.report is not None:
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
    bad = {k: v for k, v in ratios.items() if v > LEAF_RATIO_LIMIT}
    if bad:
        print(f"error: leaf growth exceeds {LEAF_RATIO_LIMIT}: {bad}",
              file=sys.stderr)
        return EXIT_NUMERICAL
    if ratios:
        print(f"leaf growth per depth: "
              f"{', '.join(f'{k}: {v:.2f}' for k, v in ratios.items())} "
              f"(limit {LEAF_RATIO_LIMIT}, dense 8.0)")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_arg_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="luxtree",
        description="Sparse-octree lighting fields: build, render, fit, "
                    "score, and composite.")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="backproject an RGB-D frame into an "
                                     "octree file")
    b.add_argument("--rgb", required=True, help="input radiance (.pfm or .png)")
    b.add_argument("--depth", required=True, help="input depth (.pfm)")
    b.add_argument("--intrinsics", required=True,
                   help="JSON with fx/fy/cx/cy/width/height")
    b.add_argument("--pose", help="optional camera-to-world pose JSON")
    b.add_argument("--max-depth", type=int, default=7)
    b.add_argument("--sigma", type=float, default=None,
                   help="surface density (default: 4 per finest voxel)")
    b.add_argument("--bbox", help="corner_x,corner_y,corner_z,side override")
    b.add_argument("--out", required=True, help="output octree (.loc1)")
    b.set_defaults(func=cmd_build)

    r = sub.add_parser("render", help="trace an image from an octree")
    r.add_argument("--octree", required=True)
    r.add_argument("--pose", help="camera pose JSON (default: identity)")
    r.add_argument("--mode", choices=("pano", "persp", "depth"),
                   default="pano")
    r.add_argument("--width", type=int, default=256)
    r.add_argument("--height", type=int, default=128)
    r.add_argument("--cone-angle", type=float, default=None,
                   help="cone half-angle override in radians")
    r.add_argument("--c0", type=float, default=None,
                   help="first step length (default: one finest voxel)")
    r.add_argument("--growth", type=float, default=2.0)
    r.add_argument("--weight-mode", choices=("paper", "unit"),
                   default="paper")
    r.add_argument("--exposure", type=float, default=1.0,
                   help="tone-map exposure for .png output")
    r.add_argument("--out", required=True, help="output image (.pfm or .png)")
    r.set_defaults(func=cmd_render)

    f = sub.add_parser("fit", help="optimize an octree against a view dir")
    f.add_argument("--init", required=True, help="initial octree (.loc1)")
    f.add_argument("--views", required=True,
                   help="dir of pano_XXX.pfm/depth_XXX.pfm/pose_XXX.json")
    f.add_argument("--config", help="fit config JSON (flags in the docs)")
    f.add_argument("--out", required=True,
                   help="fitted octree; a .json sidecar records the run")
    f.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="score an octree against held-out views")
    e.add_argument("--pred", required=True, help="octree to score (.loc1)")
    e.add_argument("--views", required=True)
    e.add_argument("--metric", choices=tuple(_METRIC_KEYS), default="psnr")
    e.add_argument("--alpha", type=float, default=1.0,
                   help="depth-gradient weight for the sc metric")
    e.add_argument("--report", help="write a MetricReport JSON here")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("insert", help="composite a shaded mesh into a frame")
    i.add_argument("--image", required=True, help="background (.pfm or .png)")
    i.add_argument("--depth", required=True, help="scene depth (.pfm)")
    i.add_argument("--intrinsics", required=True)
    i.add_argument("--octree", required=True, help="lighting octree (.loc1)")
    i.add_argument("--mesh", required=True, help="object geometry (.obj)")
    i.add_argument("--transform", help="object-to-camera transform JSON")
    i.add_argument("--material", choices=("diffuse", "metallic"),
                   default="diffuse")
    i.add_argument("--albedo", default="0.8,0.8,0.8")
    i.add_argument("--roughness", type=float, default=0.5)
    i.add_argument("--exposure", type=float, default=1.0)
    i.add_argument("--out", required=True, help="output image (.pfm or .png)")
    i.set_defaults(func=cmd_insert)

    n = sub.add_parser("bench", help="sparsity and cost report on test scenes")
    n.add_argument("--scene", choices=tuple(_SCENES), required=True)
    n.add_argument("--depths", default="5,6,7",
                   help="comma-separated octree depths")
    n.add_argument("--render-width", type=int, default=256)
    n.add_argument("--render-height", type=int, default=128)
    n.add_argument("--report", help="write the full JSON report here")
    n.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_arg_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (BadMagic, UnsupportedVersion, UnsupportedEndianness,
            OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceDetected, DegenerateSchedule) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ToolkitError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
