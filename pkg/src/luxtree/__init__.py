"""Sparse voxel-octree lighting fields.

Build RGBA lighting octrees from RGB-D captures, render them with a
differentiable cone tracer, fit them to multi-view HDR panoramas, and
relight virtual objects composited into the original frames.
"""

from .camera import CameraPose, Cone, ConeGrid, Intrinsics, backproject, \
    panorama_cones, panorama_dirs, perspective_cones
from .errors import BadMagic, DegenerateSchedule, DivergenceDetected, \
    EmptyCloud, EmptyMask, NegativeInput, NoViews, OutsideBBox, \
    PointOutOfUnitCube, ShapeMismatch, SizeMismatch, ToolkitError, \
    UnsupportedEndianness, UnsupportedVersion
from .fitter import FitConfig, View, evaluate, fit
from .formats import MetricReport, file_digest, read_obj, read_octree, \
    read_pfm, read_ply, read_png, read_pose, read_transform, tone_map, \
    write_obj, write_octree, write_pfm, write_ply, write_png, write_pose
from .insertion import Material, TriangleMesh, build_trigrid, insert_render, \
    intersect, occlusion_depth, shade_point
from .metrics import LossWeights, SCConfig, log_l2, octree_bce, psnr, \
    scale_invariant_l2, sc_metric
from .octree import LightingOctree, OctreeLevel, PointCloud, WorldBBox, \
    aggregate_mips, build_octree, check_invariants, decode_keys, \
    empty_octree, encode_keys, from_leaves, locate, locate_many, \
    normalize_cloud, prune, stats, subdivide
from .renderer import GradientBuffer, MarchConfig, TraceResult, backward, \
    backward_batch, march_batch, render_image, sample_schedule, trace_cone, \
    trace_cone_oracle

__version__ = "0.1.0"

__all__ = [
    "BadMagic", "CameraPose", "Cone", "ConeGrid", "DegenerateSchedule",
    "DivergenceDetected", "EmptyCloud", "EmptyMask", "FitConfig",
    "GradientBuffer", "Intrinsics", "LightingOctree", "LossWeights",
    "MarchConfig", "Material", "MetricReport", "NegativeInput", "NoViews",
    "OctreeLevel", "OutsideBBox", "PointCloud", "PointOutOfUnitCube",
    "SCConfig", "ShapeMismatch", "SizeMismatch", "ToolkitError",
    "TraceResult", "TriangleMesh", "UnsupportedEndianness",
    "UnsupportedVersion", "View", "WorldBBox", "aggregate_mips", "backproject",
    "backward", "backward_batch", "build_octree", "build_trigrid",
    "check_invariants", "decode_keys", "empty_octree", "encode_keys",
    "evaluate", "file_digest", "fit", "from_leaves", "insert_render",
    "intersect", "locate", "locate_many", "log_l2", "march_batch",
    "normalize_cloud", "occlusion_depth", "octree_bce", "panorama_cones",
    "panorama_dirs", "perspective_cones", "prune", "psnr", "read_obj",
    "read_octree", "read_pfm", "read_ply", "read_png", "read_pose",
    "read_transform", "render_image", "sample_schedule", "scale_invariant_l2",
    "sc_metric", "shade_point", "stats", "subdivide", "tone_map",
    "trace_cone", "trace_cone_oracle", "write_obj", "write_octree",
    "write_pfm", "write_ply", "write_png", "write_pose",
]
