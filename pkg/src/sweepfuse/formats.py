"""File I/O: trajectory text files, float depth maps, netpbm images, PLY clouds.

Trajectory lines are "timestamp tx ty tz qx qy qz qw" (camera-to-world,
quaternion x y z w), '#' starts a comment. Depth maps are binary PFM
(little-endian float32, rows stored top to bottom); invalid depth is 0.
Point clouds are binary little-endian PLY.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .geometry import CameraIntrinsics, RigidPose, Trajectory

INVALID_DEPTH = 0.0


# ---------------------------------------------------------------------------
# trajectories


def read_trajectory(path) -> Trajectory:
    timestamps = []
    poses = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DataFormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            q = np.array(vals[4:8])
            norm = np.linalg.norm(q)
            if abs(norm - 1.0) > 1e-6:
                raise DataFormatError(f"{path}:{lineno}: quaternion is not unit length")
            q = q / norm
            timestamps.append(vals[0])
            poses.append(RigidPose.from_quaternion(q, np.array(vals[1:4])))
    if not poses:
        raise DataFormatError(f"{path}: no trajectory entries")
    ts = np.array(timestamps)
    if np.any(np.diff(ts) <= 0):
        raise DataFormatError(f"{path}: timestamps not strictly increasing")
    return Trajectory(ts, poses)


def write_trajectory(path, traj: Trajectory) -> None:
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, pose in zip(traj.timestamps, traj.poses):
            t = pose.translation
            q = pose.to_quaternion()
            fields = [ts, t[0], t[1], t[2], q[0], q[1], q[2], q[3]]
            fh.write(" ".join(f"{v:.17g}" for v in fields) + "\n")


# ---------------------------------------------------------------------------
# depth maps (PFM, grayscale, little-endian, top-down row order)


def write_depth(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise DataFormatError("depth map must be 2-d")
    if not np.all(np.isfinite(depth)):
        raise DataFormatError("depth map contains non-finite values")
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{depth.shape[1]} {depth.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(depth.astype("<f4").tobytes())


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"^Pf\n(\d+) (\d+)\n(-?[0-9.eE+]+)\n", data)
    if not m:
        raise DataFormatError(f"{path}: not a grayscale PFM header")
    w, h = int(m.group(1)), int(m.group(2))
    scale = float(m.group(3))
    payload = data[m.end():]
    if len(payload) != w * h * 4:
        raise DataFormatError(f"{path}: truncated payload")
    dtype = "<f4" if scale < 0 else ">f4"
    depth = np.frombuffer(payload, dtype=dtype).reshape(h, w).astype(np.float32)
    if np.any(np.isnan(depth)) or np.any(np.isinf(depth)):
        raise DataFormatError(f"{path}: non-finite depth values")
    return depth


# ---------------------------------------------------------------------------
# images (binary PPM P6 / PGM P5, maxval 255)


def _read_pnm_tokens(data: bytes, count: int):
    """Read header tokens, skipping whitespace and '#' comments."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(data):
            raise DataFormatError("truncated netpbm header")
        c = data[pos:pos + 1]
        if c in b" \t\r\n":
            pos += 1
        elif c == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
        else:
            end = pos
            while end < len(data) and data[end:end + 1] not in b" \t\r\n":
                end += 1
            tokens.append(data[pos:end])
            pos = end
    return tokens, pos + 1  # single whitespace after the last token


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise DataFormatError("image must be uint8")
    with open(path, "wb") as fh:
        if image.ndim == 3 and image.shape[2] == 3:
            fh.write(f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        elif image.ndim == 2:
            fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        else:
            raise DataFormatError("image must be (h, w) or (h, w, 3)")
        fh.write(image.tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] not in (b"P5", b"P6"):
        raise DataFormatError(f"{path}: not a binary PGM/PPM file")
    channels = 3 if data[:2] == b"P6" else 1
    tokens, offset = _read_pnm_tokens(data[2:], 3)
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise DataFormatError(f"{path}: unsupported maxval {maxval}")
    payload = data[2 + offset:]
    need = w * h * channels
    if len(payload) < need:
        raise DataFormatError(f"{path}: truncated pixel data")
    img = np.frombuffer(payload[:need], dtype=np.uint8)
    return img.reshape(h, w, 3) if channels == 3 else img.reshape(h, w)


# ---------------------------------------------------------------------------
# point clouds (binary little-endian PLY)

_PLY_DTYPES = {
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1",
    "char": "i1", "int8": "i1",
    "short": "<i2", "int16": "<i2",
    "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
}


def write_cloud(path, points: np.ndarray, normals=None, colors=None) -> None:
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    n = points.shape[0]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if normals is not None:
        normals = np.asarray(normals, dtype=np.float32).reshape(-1, 3)
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
        header += ["property float nx", "property float ny", "property float nz"]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")

    rec = np.empty(n, dtype=fields)
    rec["x"], rec["y"], rec["z"] = points[:, 0], points[:, 1], points[:, 2]
    if normals is not None:
        rec["nx"], rec["ny"], rec["nz"] = normals[:, 0], normals[:, 1], normals[:, 2]
    if colors is not None:
        rec["red"], rec["green"], rec["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode())
        fh.write(rec.tobytes())


def read_cloud(path):
    """Read a binary PLY vertex list.

    Returns (points, normals, colors); normals/colors are None when absent.
    Unknown scalar vertex properties are skipped.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise DataFormatError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    payload = data[end + len(b"end_header\n"):]

    fmt = next((ln.split()[1] for ln in header if ln.startswith("format ")), None)
    if fmt != "binary_little_endian":
        raise DataFormatError(f"{path}: unsupported PLY format {fmt}")

    n_vertex = None
    fields = []
    in_vertex = False
    for ln in header:
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertex = int(parts[2])
            elif n_vertex is not None:
                break  # vertex data precedes later elements; stop collecting
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise DataFormatError(f"{path}: list properties are unsupported")
            if parts[1] not in _PLY_DTYPES:
                raise DataFormatError(f"{path}: unknown property type {parts[1]}")
            fields.append((parts[2], _PLY_DTYPES[parts[1]]))
    if n_vertex is None:
        raise DataFormatError(f"{path}: no vertex element")

    rec_dtype = np.dtype(fields)
    if len(payload) < n_vertex * rec_dtype.itemsize:
        raise DataFormatError(f"{path}: truncated vertex data")
    rec = np.frombuffer(payload[: n_vertex * rec_dtype.itemsize], dtype=rec_dtype)

    names = {f[0] for f in fields}
    if not {"x", "y", "z"} <= names:
        raise DataFormatError(f"{path}: vertex element lacks x/y/z")
    points = np.stack(
        [rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    normals = None
    if {"nx", "ny", "nz"} <= names:
        normals = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(np.float64)
    colors = None
    if {"red", "green", "blue"} <= names:
        colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.uint8)
    return points, normals, colors


def write_camera(path, k: CameraIntrinsics) -> None:
    with open(path, "w") as fh:
        fh.write("# fx fy cx cy width height\n")
        fh.write(f"{k.fx:.17g} {k.fy:.17g} {k.cx:.17g} {k.cy:.17g} "
                 f"{k.width} {k.height}\n")


def read_camera(path) -> CameraIntrinsics:
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DataFormatError(f"{path}:{lineno}: expected 6 fields")
            try:
                fx, fy, cx, cy = (float(p) for p in parts[:4])
                width, height = int(parts[4]), int(parts[5])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
            return CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy,
                                    width=width, height=height)
    raise DataFormatError(f"{path}: no camera line")


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
