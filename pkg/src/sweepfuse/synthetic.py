"""Deterministic synthetic datasets: raycast scenes with exact ground truth.

Scenes are a textured ground plane (z = 0) plus axis-aligned textured boxes,
rendered analytically by per-pixel ray intersection, so ground-truth depth is
exact and the whole dataset is a pure function of the scene description and
its seed. Two camera paths are supported: an orbit around a target (the
aerial-survey pattern) and a straight line with a fixed viewing direction
(used for the planar depth-quality fixtures).

World frame: z up, ground at z = 0. Camera frame: x right, y down, z forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SceneError
from .formats import (
    ensure_dir,
    write_camera,
    write_cloud,
    write_depth,
    write_image,
    write_trajectory,
)
from .geometry import CameraIntrinsics, RigidPose, Trajectory

_EPS = 1e-9

_PALETTE = (
    (0.95, 0.80, 0.62),
    (0.70, 0.86, 0.98),
    (0.93, 0.90, 0.66),
    (0.78, 0.94, 0.78),
    (0.92, 0.76, 0.92),
)
_GROUND_COLOR = (0.86, 0.88, 0.72)
_SKY_COLOR = (150, 185, 225)


@dataclass(frozen=True)
class Box:
    """Upright box: center, full edge lengths, rotation about vertical.

    Varied yaws matter: if every box kept world-aligned faces the scene
    would expose only two plane orientations and camera registration would
    be unconstrained along one translation direction.
    """

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw_deg: float = 0.0

    def __post_init__(self) -> None:
        if min(self.size) <= 0.0:
            raise SceneError("box size must be positive")

    @property
    def lo(self) -> np.ndarray:
        return -0.5 * np.asarray(self.size)

    @property
    def hi(self) -> np.ndarray:
        return 0.5 * np.asarray(self.size)

    @property
    def rotation(self) -> np.ndarray:
        """Local-to-world rotation (about +z)."""
        c = math.cos(math.radians(self.yaw_deg))
        s = math.sin(math.radians(self.yaw_deg))
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class SyntheticScene:
    """Scene geometry, camera model and capture path."""

    width: int = 256
    height: int = 192
    fx: float = 240.0
    fy: float = 240.0
    cx: float | None = None
    cy: float | None = None
    frames: int = 60
    fps: float = 30.0
    seed: int = 0
    path: str = "orbit"
    orbit_radius: float = 10.0
    orbit_height: float = 10.0
    orbit_step_deg: float = 3.0
    orbit_start_deg: float = 0.0
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    line_start: tuple[float, float, float] = (0.0, 0.0, 10.0)
    line_step: tuple[float, float, float] = (0.4, 0.0, 0.0)
    look_dir: tuple[float, float, float] = (0.0, 0.0, -1.0)
    ground: bool = True
    boxes: tuple[Box, ...] = (Box((0.0, 0.0, 1.5), (4.0, 4.0, 3.0)),)

    def __post_init__(self) -> None:
        if self.path not in ("orbit", "line"):
            raise SceneError(f"unknown camera path {self.path!r}")
        if self.frames < 1:
            raise SceneError("need at least one frame")
        if self.fps <= 0.0:
            raise SceneError("fps must be positive")
        if self.cx is None:
            object.__setattr__(self, "cx", (self.width - 1) / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", (self.height - 1) / 2.0)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(fx=self.fx, fy=self.fy, cx=self.cx,
                                cy=self.cy, width=self.width,
                                height=self.height)


def look_pose(eye, forward, up_hint=(0.0, 0.0, 1.0)) -> RigidPose:
    """Camera-to-world pose looking along forward with image-up near up_hint."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(forward, dtype=np.float64)
    nz = np.linalg.norm(z)
    if nz < _EPS:
        raise SceneError("viewing direction is zero")
    z = z / nz
    x = np.cross(z, np.asarray(up_hint, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidPose(np.stack([x, y, z], axis=1), eye)


def camera_pose(scene: SyntheticScene, index: int) -> RigidPose:
    if scene.path == "orbit":
        ang = math.radians(scene.orbit_start_deg + index * scene.orbit_step_deg)
        target = np.asarray(scene.look_at, dtype=np.float64)
        eye = target + np.array([
            scene.orbit_radius * math.cos(ang),
            scene.orbit_radius * math.sin(ang),
            scene.orbit_height,
        ])
        return look_pose(eye, target - eye)
    eye = (np.asarray(scene.line_start, dtype=np.float64)
           + index * np.asarray(scene.line_step, dtype=np.float64))
    return look_pose(eye, scene.look_dir)


# ---------------------------------------------------------------------------
# procedural texture: multi-octave value noise plus a unit checkerboard


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash to [0, 1), vectorized (splitmix-style)."""
    seed_mix = (seed * 0xD6E8FEB86659FD93) & 0xFFFFFFFFFFFFFFFF
    z = (ix.astype(np.int64).view(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
         ^ iy.astype(np.int64).view(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ np.uint64(seed_mix))
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _value_noise(u: np.ndarray, v: np.ndarray, scale: float, seed: int) -> np.ndarray:
    x = u / scale
    y = v / scale
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    sx = fx * fx * (3.0 - 2.0 * fx)
    sy = fy * fy * (3.0 - 2.0 * fy)
    ix = x0.astype(np.int64)
    iy = y0.astype(np.int64)
    c00 = _hash01(ix, iy, seed)
    c10 = _hash01(ix + 1, iy, seed)
    c01 = _hash01(ix, iy + 1, seed)
    c11 = _hash01(ix + 1, iy + 1, seed)
    top = c00 + (c10 - c00) * sx
    bot = c01 + (c11 - c01) * sx
    return top + (bot - top) * sy


def _tile_noise(u: np.ndarray, v: np.ndarray, scale: float,
                seed: int) -> np.ndarray:
    """Binary per-cell noise: hard edges at every cell border."""
    ix = np.floor(u / scale).astype(np.int64)
    iy = np.floor(v / scale).astype(np.int64)
    return (_hash01(ix, iy, seed) > 0.5).astype(np.float64)


def surface_texture(u: np.ndarray, v: np.ndarray, seed: int) -> np.ndarray:
    """Albedo multiplier in [0.05, 1].

    Smooth value-noise octaves give large-scale variation; a fine binary
    tile pattern supplies dense band-pass contrast so texture filters keep
    most surface pixels; a unit checker adds unambiguous long edges.
    """
    t = (0.16 * _value_noise(u, v, 3.5, seed)
         + 0.12 * _value_noise(u, v, 0.9, seed + 101)
         + 0.12 * _value_noise(u, v, 0.35, seed + 202)
         + 0.60 * _tile_noise(u, v, 0.18, seed + 303))
    checker = (np.floor(u) + np.floor(v)).astype(np.int64) & 1
    return 0.05 + 0.80 * t + 0.15 * checker.astype(np.float64)


# ---------------------------------------------------------------------------
# raycasting


def _check_camera_clearance(scene: SyntheticScene, eye: np.ndarray) -> None:
    if scene.ground and eye[2] <= 1e-6:
        raise SceneError("camera at or below the ground plane")
    for box in scene.boxes:
        local = box.rotation.T @ (eye - np.asarray(box.center))
        if np.all(local >= box.lo - 1e-6) and np.all(local <= box.hi + 1e-6):
            raise SceneError("camera inside scene geometry")


def render_frame(scene: SyntheticScene, index: int):
    """Render one frame: (rgb uint8, depth float32, world normals float32, pose).

    Depth is the camera-frame z of the first intersection; pixels that see
    only sky are invalid (0).
    """
    pose = camera_pose(scene, index)
    eye = pose.translation
    _check_camera_clearance(scene, eye)

    k = scene.intrinsics
    h, w = scene.height, scene.width
    xs = (np.arange(w, dtype=np.float64) - k.cx) / k.fx
    ys = (np.arange(h, dtype=np.float64) - k.cy) / k.fy
    gx, gy = np.meshgrid(xs, ys)
    dirs_cam = np.stack([gx, gy, np.ones_like(gx)], axis=2)
    dirs = dirs_cam @ pose.rotation.T  # world directions, z_cam scale 1

    t_best = np.full((h, w), np.inf)
    tex_u = np.zeros((h, w))
    tex_v = np.zeros((h, w))
    surf_id = np.full((h, w), -1, dtype=np.int64)
    normal = np.zeros((h, w, 3))

    def commit(t, mask, uu, vv, sid, nvec):
        closer = mask & (t < t_best)
        t_best[closer] = t[closer]
        tex_u[closer] = uu[closer]
        tex_v[closer] = vv[closer]
        surf_id[closer] = sid
        normal[closer] = nvec if nvec.ndim == 1 else nvec[closer]

    if scene.ground:
        dz = dirs[:, :, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -eye[2] / dz
        mask = (dz < -_EPS) & (t > _EPS)
        uu = eye[0] + t * dirs[:, :, 0]
        vv = eye[1] + t * dirs[:, :, 1]
        commit(t, mask, uu, vv, 0, np.array([0.0, 0.0, 1.0]))

    for bi, box in enumerate(scene.boxes):
        # slab test in the box's own frame; t keeps camera-z scale
        rot = box.rotation
        eye_l = rot.T @ (eye - np.asarray(box.center, dtype=np.float64))
        dirs_l = dirs @ rot
        d_safe = np.where(np.abs(dirs_l) < 1e-300, 1e-300, dirs_l)
        t1 = (box.lo[None, None, :] - eye_l) / d_safe
        t2 = (box.hi[None, None, :] - eye_l) / d_safe
        tlo = np.minimum(t1, t2)
        thi = np.maximum(t1, t2)
        tmin = tlo.max(axis=2)
        tmax = thi.min(axis=2)
        mask = (tmax >= tmin) & (tmin > _EPS)
        axis = np.argmax(tlo, axis=2)
        hit = eye_l[None, None, :] + tmin[:, :, None] * dirs_l
        nloc = np.zeros((h, w, 3))
        sgn = -np.sign(np.take_along_axis(dirs_l, axis[:, :, None], axis=2)[:, :, 0])
        np.put_along_axis(nloc, axis[:, :, None], sgn[:, :, None], axis=2)
        nvec = nloc @ rot.T
        ua = (axis + 1) % 3
        va = (axis + 2) % 3
        uu = np.take_along_axis(hit, ua[:, :, None], axis=2)[:, :, 0]
        vv = np.take_along_axis(hit, va[:, :, None], axis=2)[:, :, 0]
        # fold the face into the texture domain so opposite faces differ
        uu = uu + 37.0 * axis
        commit(tmin, mask, uu, vv, 1 + bi, nvec)

    hit_any = np.isfinite(t_best)
    depth = np.where(hit_any, t_best, 0.0).astype(np.float32)

    rgb = np.empty((h, w, 3), dtype=np.uint8)
    rgb[:, :] = _SKY_COLOR
    bases = [_GROUND_COLOR] + [
        _PALETTE[i % len(_PALETTE)] for i in range(len(scene.boxes))
    ]
    for sid, base in enumerate(bases):
        sel = surf_id == sid
        if not np.any(sel):
            continue
        alb = surface_texture(tex_u[sel], tex_v[sel], scene.seed * 1000003 + sid)
        for c in range(3):
            rgb[sel, c] = np.rint(
                np.clip(base[c] * alb * 255.0, 0.0, 255.0)).astype(np.uint8)

    normals = np.where(hit_any[:, :, None], normal, 0.0).astype(np.float32)
    return rgb, depth, normals, pose


def scene_preset(name: str, frames: int | None = None,
                 seed: int = 0) -> SyntheticScene:
    """Named capture setups: 'orbit' circles a box; 'fronto' translates over
    the ground looking straight down; 'slant' views the ground at 45 deg."""
    if name == "orbit":
        return SyntheticScene(
            frames=frames or 60, seed=seed,
            boxes=(
                Box((0.0, 0.2, 1.25), (3.0, 2.2, 2.5), yaw_deg=15.0),
                Box((2.8, -2.3, 0.9), (1.8, 1.8, 1.8), yaw_deg=40.0),
                Box((-2.9, -2.0, 0.75), (2.0, 1.4, 1.5), yaw_deg=-25.0),
                Box((-2.0, 2.8, 0.6), (1.6, 2.0, 1.2), yaw_deg=65.0),
                Box((2.4, 2.6, 0.5), (1.2, 1.2, 1.0), yaw_deg=-50.0),
            ))
    if name == "fronto":
        return SyntheticScene(
            path="line", frames=frames or 8, seed=seed,
            line_start=(0.0, 0.0, 10.0), line_step=(0.35, 0.0, 0.0),
            look_dir=(0.0, 0.0, -1.0), boxes=())
    if name == "slant":
        inv_sqrt2 = 1.0 / math.sqrt(2.0)
        return SyntheticScene(
            path="line", frames=frames or 8, seed=seed,
            line_start=(0.0, 0.0, 6.0), line_step=(0.0, 0.30, 0.0),
            look_dir=(inv_sqrt2, 0.0, -inv_sqrt2), boxes=())
    raise SceneError(f"unknown scene preset {name!r}")


def scene_trajectory(scene: SyntheticScene) -> Trajectory:
    ts = np.arange(scene.frames, dtype=np.float64) / scene.fps
    poses = [camera_pose(scene, i) for i in range(scene.frames)]
    return Trajectory(ts, poses)


def generate_synthetic(scene: SyntheticScene, out_dir,
                       cloud_frame_stride: int = 2,
                       cloud_pixel_stride: int = 2,
                       cloud_voxel: float = 0.02,
                       write_gt_depth: bool = True) -> Path:
    """Write a full dataset: images, ground-truth depth, trajectory, camera
    file and a voxel-downsampled ground-truth cloud. Returns the directory."""
    from .evaluation import PointCloud, backproject_depth, voxel_downsample

    root = ensure_dir(out_dir)
    rgb_dir = ensure_dir(root / "rgb")
    depth_dir = ensure_dir(root / "depth_gt") if write_gt_depth else None

    cloud_pts = []
    cloud_nrm = []
    cloud_col = []
    poses = []
    for i in range(scene.frames):
        rgb, depth, normals, pose = render_frame(scene, i)
        poses.append(pose)
        write_image(rgb_dir / f"{i:06d}.ppm", rgb)
        if depth_dir is not None:
            write_depth(depth_dir / f"{i:06d}.pfm", depth)
        if i % cloud_frame_stride == 0:
            s = cloud_pixel_stride
            sub_depth = depth[::s, ::s]
            sub_rgb = rgb[::s, ::s]
            sub_nrm = normals[::s, ::s].reshape(-1, 3)
            k = scene.intrinsics
            sub_k = CameraIntrinsics(fx=k.fx / s, fy=k.fy / s, cx=k.cx / s,
                                     cy=k.cy / s, width=sub_depth.shape[1],
                                     height=sub_depth.shape[0])
            pc = backproject_depth(sub_depth, sub_rgb, sub_k, pose)
            sel = sub_depth.reshape(-1) > 0
            cloud_pts.append(pc.points)
            cloud_nrm.append(sub_nrm[sel])
            cloud_col.append(pc.colors)

    ts = np.arange(scene.frames, dtype=np.float64) / scene.fps
    write_trajectory(root / "trajectory.txt", Trajectory(ts, poses))
    write_camera(root / "camera.txt", scene.intrinsics)

    gt = PointCloud(points=np.concatenate(cloud_pts),
                    normals=np.concatenate(cloud_nrm),
                    colors=np.concatenate(cloud_col))
    gt = voxel_downsample(gt, cloud_voxel)
    write_cloud(root / "gt_cloud.ply", gt.points, gt.normals, gt.colors)
    return root
