"""File I/O: PFM images, PLY point clouds, LOC1 octrees, PNG, OBJ, JSON."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .camera import CameraPose, Intrinsics
from .errors import (BadMagic, ShapeMismatch, UnsupportedEndianness,
                     UnsupportedVersion)
from .octree import LightingOctree, OctreeLevel, PointCloud, WorldBBox

_OCTREE_MAGIC = b"LOC1"
_OCTREE_VERSION = 1


# ---------------------------------------------------------------- PFM images

def write_pfm(path, image) -> None:
    """Write a float32 image: 'PF' for (H,W,3) RGB, 'Pf' for (H,W) scalar.

    Scale is -1.0 (little-endian) and rows are stored bottom to top.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"PF"
    elif img.ndim == 2:
        magic = b"Pf"
    else:
        raise ShapeMismatch(f"PFM wants (H,W,3) or (H,W), got {img.shape}")
    h, w = img.shape[0], img.shape[1]
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(np.flipud(img), dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into float32, (H,W,3) for color or (H,W) for scalar."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise BadMagic(f"not a PFM file: {path}")
        try:
            w, h = (int(t) for t in f.readline().split())
            scale = float(f.readline().strip())
        except ValueError as e:
            raise BadMagic(f"malformed PFM header in {path}") from e
        if scale >= 0.0:
            raise UnsupportedEndianness("big-endian PFM data is not supported")
        ch = 3 if magic == b"PF" else 1
        raw = f.read(w * h * ch * 4)
    if len(raw) != w * h * ch * 4:
        raise BadMagic(f"truncated PFM pixel data in {path}")
    arr = np.frombuffer(raw, dtype="<f4")
    arr = arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)
    return np.flipud(arr).copy()


# ----------------------------------------------------------------- PNG (LDR)

def tone_map(hdr: np.ndarray, exposure: float = 1.0) -> np.ndarray:
    """x -> x*e / (1 + x*e): maps [0, inf) onto [0, 1)."""
    x = np.clip(np.asarray(hdr, dtype=np.float64), 0.0, None) * exposure
    return x / (1.0 + x)


def write_png(path, hdr, exposure: float = 1.0, gamma: float = 2.2) -> None:
    """Tone map linear radiance and save an 8-bit PNG."""
    t = tone_map(hdr, exposure) ** (1.0 / gamma)
    b = np.clip(np.rint(t * 255.0), 0, 255).astype(np.uint8)
    if b.ndim == 3 and b.shape[2] == 3:
        Image.fromarray(b, mode="RGB").save(path)
    elif b.ndim == 2:
        Image.fromarray(b, mode="L").save(path)
    else:
        raise ShapeMismatch(f"PNG wants (H,W,3) or (H,W), got {b.shape}")


def read_png(path, exposure: float = 1.0, gamma: float = 2.2) -> np.ndarray:
    """Invert the tone map back to linear radiance (saturated pixels cap)."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    t = np.minimum(arr ** gamma, 1.0 - 1e-6)
    return t / ((1.0 - t) * exposure)


# ------------------------------------------------------------------- PLY I/O

_PLY_PROPS_XYZ = [("float", "x"), ("float", "y"), ("float", "z")]
_PLY_PROPS_RGB = [("uchar", "red"), ("uchar", "green"), ("uchar", "blue")]


def write_ply(path, cloud: PointCloud) -> None:
    """Binary little-endian PLY: float32 xyz + uchar rgb per vertex."""
    pos = np.asarray(cloud.positions, dtype="<f4")
    col = np.clip(np.asarray(cloud.colors, dtype=np.float64), 0.0, 1.0)
    rgb = np.rint(col * 255.0).astype(np.uint8)
    if pos.ndim != 2 or pos.shape[1] != 3 or rgb.shape != pos.shape:
        raise ShapeMismatch("point cloud wants matching (N,3) arrays")
    n = pos.shape[0]
    header = [
        b"ply",
        b"format binary_little_endian 1.0",
        f"element vertex {n}".encode("ascii"),
    ]
    header += [f"property {t} {nm}".encode("ascii")
               for t, nm in _PLY_PROPS_XYZ + _PLY_PROPS_RGB]
    header.append(b"end_header")
    rec = np.zeros(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
    rec["xyz"] = pos
    rec["rgb"] = rgb
    with open(path, "wb") as f:
        f.write(b"\n".join(header) + b"\n")
        f.write(rec.tobytes())


def read_ply(path) -> PointCloud:
    """Read the PLY layout written by write_ply; missing colors mean white."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise BadMagic(f"not a PLY file: {path}")
        n = None
        props: list[tuple[str, str]] = []
        while True:
            line = f.readline()
            if not line:
                raise BadMagic(f"PLY header never ends in {path}")
            tok = line.strip().split()
            if not tok:
                continue
            if tok[0] == b"format":
                if tok[1] == b"binary_big_endian":
                    raise UnsupportedEndianness("big-endian PLY not supported")
                if tok[1] != b"binary_little_endian":
                    raise UnsupportedVersion(f"PLY format {tok[1].decode()} "
                                             "not supported")
            elif tok[0] == b"element":
                if tok[1] != b"vertex" or n is not None:
                    raise UnsupportedVersion("only a single vertex element "
                                             "is supported")
                n = int(tok[2])
            elif tok[0] == b"property":
                props.append((tok[1].decode(), tok[2].decode()))
            elif tok[0] == b"end_header":
                break
        if n is None:
            raise BadMagic(f"PLY header lacks a vertex element in {path}")
        if props[:3] != _PLY_PROPS_XYZ:
            raise UnsupportedVersion("PLY must start with float x,y,z")
        has_rgb = props[3:] == _PLY_PROPS_RGB
        if not has_rgb and props[3:]:
            raise UnsupportedVersion("unsupported PLY property layout")
        dt = [("xyz", "<f4", 3)] + ([("rgb", "u1", 3)] if has_rgb else [])
        raw = f.read(n * np.dtype(dt).itemsize)
    if len(raw) != n * np.dtype(dt).itemsize:
        raise BadMagic(f"truncated PLY vertex data in {path}")
    rec = np.frombuffer(raw, dtype=dt)
    pos = rec["xyz"].astype(np.float64)
    if has_rgb:
        col = rec["rgb"].astype(np.float64) / 255.0
    else:
        col = np.ones_like(pos)
    return PointCloud(pos, col)


# ----------------------------------------------------------- LOC1 octree I/O

def write_octree(path, tree: LightingOctree) -> None:
    """Serialize an octree: LOC1 header, then per-level keys/split/features.

    Features are stored as float32, so a bit-exact round trip requires
    float32-representable values (aggregation and fitting stay in float64).
    """
    with open(path, "wb") as f:
        f.write(_OCTREE_MAGIC)
        f.write(struct.pack("<II", _OCTREE_VERSION, tree.max_depth))
        c = np.asarray(tree.bbox.corner, dtype=np.float64)
        f.write(struct.pack("<4d", c[0], c[1], c[2], float(tree.bbox.side)))
        for lv in tree.levels:
            f.write(struct.pack("<Q", len(lv)))
            f.write(lv.keys.astype("<u8").tobytes())
            f.write(lv.split.astype("u1").tobytes())
            f.write(np.ascontiguousarray(lv.features, dtype="<f4").tobytes())


def read_octree(path) -> LightingOctree:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _OCTREE_MAGIC:
        raise BadMagic(f"not a LOC1 octree file: {path}")
    try:
        version, max_depth = struct.unpack_from("<II", data, 4)
        if version != _OCTREE_VERSION:
            raise UnsupportedVersion(f"octree format version {version}")
        cx, cy, cz, side = struct.unpack_from("<4d", data, 12)
        off = 44
        levels = []
        for d in range(max_depth + 1):
            (cnt,) = struct.unpack_from("<Q", data, off)
            off += 8
            keys = np.frombuffer(data, dtype="<u8", count=cnt, offset=off)
            off += cnt * 8
            split = np.frombuffer(data, dtype="u1", count=cnt, offset=off)
            off += cnt
            feats = np.frombuffer(data, dtype="<f4", count=cnt * 4, offset=off)
            off += cnt * 16
            if cnt and np.any(keys[1:] <= keys[:-1]):
                raise BadMagic(f"level {d} keys not sorted in {path}")
            levels.append(OctreeLevel(
                keys.astype(np.uint64),
                split.astype(np.uint8),
                feats.astype(np.float64).reshape(cnt, 4),
            ))
    except (struct.error, ValueError) as e:
        raise BadMagic(f"truncated octree file: {path}") from e
    if off != len(data):
        raise BadMagic(f"trailing bytes after octree payload in {path}")
    return LightingOctree(int(max_depth), levels,
                          WorldBBox(np.array([cx, cy, cz]), float(side)))


# ------------------------------------------------------------------ OBJ mesh

def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Read OBJ vertices and faces; polygons are fan-triangulated.

    Returns (vertices (V,3) float64, faces (F,3) int64, 0-based).
    """
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                idx = []
                for t in tok[1:]:
                    i = int(t.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts or not faces:
        raise BadMagic(f"OBJ file has no triangles: {path}")
    v = np.asarray(verts, dtype=np.float64)
    fc = np.asarray(faces, dtype=np.int64)
    if fc.min() < 0 or fc.max() >= len(v):
        raise BadMagic(f"OBJ face index out of range in {path}")
    return v, fc


def write_obj(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    """Write a triangle mesh as OBJ (1-based face indices)."""
    with open(path, "w", encoding="utf-8") as f:
        for v in np.asarray(vertices, dtype=np.float64):
            f.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in np.asarray(faces, dtype=np.int64):
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


# --------------------------------------------------------------- JSON blocks

def write_pose(path, pose: CameraPose, intr: Intrinsics | None = None) -> None:
    d: dict = {"cam_to_world": pose.to_matrix().reshape(-1).tolist()}
    if intr is not None:
        d.update(fx=intr.fx, fy=intr.fy, cx=intr.cx, cy=intr.cy,
                 width=intr.width, height=intr.height)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(d, f, indent=2, sort_keys=True)
        f.write("\n")


def read_pose(path) -> tuple[CameraPose, Intrinsics | None]:
    with open(path, "r", encoding="utf-8") as f:
        d = json.load(f)
    m = np.asarray(d["cam_to_world"], dtype=np.float64).reshape(4, 4)
    pose = CameraPose.from_matrix(m)
    intr = None
    if "fx" in d:
        intr = Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]),
                          float(d["cy"]), int(d["width"]), int(d["height"]))
    return pose, intr


def read_transform(path) -> np.ndarray:
    """Object-to-world transform: {"matrix": [16]} or scale/rotation/translation."""
    with open(path, "r", encoding="utf-8") as f:
        d = json.load(f)
    if "matrix" in d:
        return np.asarray(d["matrix"], dtype=np.float64).reshape(4, 4)
    m = np.eye(4)
    rot = np.asarray(d.get("rotation", np.eye(3).ravel().tolist()),
                     dtype=np.float64).reshape(3, 3)
    m[:3, :3] = rot * float(d.get("scale", 1.0))
    m[:3, 3] = np.asarray(d.get("translation", [0.0, 0.0, 0.0]),
                          dtype=np.float64)
    return m


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class MetricReport:
    """JSON-serializable record of one scored run."""

    name: str
    value: float
    config: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)

    def to_json(self) -> str:
        body = {"name": self.name, "value": self.value,
                "config": self.config, "inputs": self.inputs}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())
