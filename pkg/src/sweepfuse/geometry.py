"""Camera models, rigid and similarity transforms, trajectories.

Conventions used throughout the package:
  * poses are camera-to-world: X_world = R @ X_cam + t
  * camera frame is x right, y down, z forward; depth is the z coordinate
  * pixel (x, y) corresponds to the projection fx * X/Z + cx, fy * Y/Z + cy
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, DegenerateGeometryError

# Rotations are re-orthonormalized when accumulated drift exceeds this.
ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics for an image of a fixed size, no distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("image size must be at least 8x8")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def matrix_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def halved(self) -> "CameraIntrinsics":
        """Intrinsics of the next coarser pyramid level (even-pixel decimation)."""
        return CameraIntrinsics(
            fx=self.fx / 2.0,
            fy=self.fy / 2.0,
            cx=self.cx / 2.0,
            cy=self.cy / 2.0,
            width=(self.width + 1) // 2,
            height=(self.height + 1) // 2,
        )


def _nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3) (closest in Frobenius norm)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def _check_rotation(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError("rotation must be 3x3")
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > 1e-6 or np.linalg.det(r) < 0:
        raise ValueError("matrix is not a rotation")
    if err > ORTHONORMAL_TOL:
        r = _nearest_rotation(r)
    return r


@dataclass
class RigidPose:
    """Rigid transform, stored as rotation matrix plus translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = _check_rotation(self.rotation)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(cls, q: np.ndarray, t: np.ndarray) -> "RigidPose":
        """Build from unit quaternion (qx, qy, qz, qw) and translation."""
        return cls(quaternion_to_rotation(q), t)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self applied after other: (self * other)(x) = self(other(x))."""
        r = self.rotation @ other.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHONORMAL_TOL:
            r = _nearest_rotation(r)
        return RigidPose(r, self.rotation @ other.translation + self.translation)

    def invert(self) -> "RigidPose":
        return RigidPose(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (n, 3) array of points (or a single point)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def to_quaternion(self) -> np.ndarray:
        return rotation_to_quaternion(self.rotation)


@dataclass
class SimilarityTransform:
    """Scaled rigid transform: x -> scale * R x + t."""

    scale: float
    rigid: RigidPose

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, RigidPose.identity())

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * (pts @ self.rigid.rotation.T) + self.rigid.translation

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        r = self.rigid.rotation @ other.rigid.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHONORMAL_TOL:
            r = _nearest_rotation(r)
        t = self.scale * self.rigid.rotation @ other.rigid.translation + self.rigid.translation
        return SimilarityTransform(self.scale * other.scale, RigidPose(r, t))

    def invert(self) -> "SimilarityTransform":
        rt = self.rigid.rotation.T
        return SimilarityTransform(
            1.0 / self.scale, RigidPose(rt, -rt @ self.rigid.translation / self.scale)
        )

    def apply_to_pose(self, pose: RigidPose) -> RigidPose:
        """Map a camera-to-world pose through this transform (rotation and
        camera center; scale acts on the center only)."""
        r = self.rigid.rotation @ pose.rotation
        t = self.scale * self.rigid.rotation @ pose.translation + self.rigid.translation
        return RigidPose(r, t)


@dataclass
class Trajectory:
    """Timestamped camera-to-world poses, strictly increasing timestamps."""

    timestamps: np.ndarray
    poses: list[RigidPose] = field(default_factory=list)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamp/pose count mismatch")
        if len(self.timestamps) == 0:
            raise ValueError("trajectory must contain at least one pose")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw) to rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=np.float64).reshape(4)
    n = x * x + y * y + z * z + w * w
    if n < 1e-12:
        raise ValueError("quaternion has near-zero norm")
    s = 2.0 / n
    return np.array(
        [
            [1 - s * (y * y + z * z), s * (x * y - z * w), s * (x * z + y * w)],
            [s * (x * y + z * w), 1 - s * (x * x + z * z), s * (y * z - x * w)],
            [s * (x * z - y * w), s * (y * z + x * w), 1 - s * (x * x + y * y)],
        ]
    )


def rotation_to_quaternion(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (qx, qy, qz, qw), qw >= 0."""
    r = np.asarray(r, dtype=np.float64)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s, 0.25 * s]
        )
    else:
        i = int(np.argmax([r[0, 0], r[1, 1], r[2, 2]]))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[i] = 0.25 * s
        q[j] = (r[j, i] + r[i, j]) / s
        q[k] = (r[k, i] + r[i, k]) / s
        q[3] = (r[k, j] - r[j, k]) / s
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """Composition a * b (apply b first, then a)."""
    return a.compose(b)


def relative_pose(ref: RigidPose, src: RigidPose) -> RigidPose:
    """Transform taking points in ref's camera frame into src's camera frame."""
    return src.invert().compose(ref)


def rotation_angle_deg(a: RigidPose, b: RigidPose) -> float:
    """Geodesic angle in degrees between the rotations of two poses."""
    r = a.rotation.T @ b.rotation
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def translation_distance(a: RigidPose, b: RigidPose) -> float:
    """Euclidean distance between camera centers."""
    return float(np.linalg.norm(a.translation - b.translation))


def plane_homography(k: CameraIntrinsics, rel: RigidPose, depth: float) -> np.ndarray:
    """Pixel homography induced by the fronto-parallel plane at the given depth.

    The plane has unit normal n = (0, 0, 1) in the reference camera frame and
    passes through (0, 0, depth); rel maps reference camera coordinates to the
    matching camera (the relative_pose(ref, match) convention). For a point X
    on the plane, n.X = depth, so X_match = R X + t (n.X)/depth, giving
    H = K (R + t n^T / d) K^{-1} - exactly consistent with unproject,
    transform, reproject.
    """
    if depth <= 0:
        raise DegenerateGeometryError("plane depth must be positive")
    n = np.array([0.0, 0.0, 1.0])
    m = rel.rotation + np.outer(rel.translation, n) / depth
    return k.matrix @ m @ k.matrix_inv


def umeyama_similarity(src: np.ndarray, dst: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity aligning src points onto dst points.

    Closed-form solution over the SVD of the cross-covariance, with the
    determinant correction that avoids reflections. Requires at least three
    non-collinear correspondences.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise AlignmentError("point sets must both be (n, 3)")
    n = src.shape[0]
    if n < 3:
        raise AlignmentError("need at least 3 correspondences")

    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    ds = src - mu_s
    dd = dst - mu_d
    var_s = (ds * ds).sum() / n
    if var_s < 1e-18:
        raise AlignmentError("source points are degenerate (zero spread)")

    cov = dd.T @ ds / n
    u, d, vt = np.linalg.svd(cov)
    if d[1] <= d[0] * 1e-12:
        raise AlignmentError("correspondences are collinear")

    s_diag = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_diag[2] = -1.0
    r = u @ np.diag(s_diag) @ vt
    scale = float((d * s_diag).sum() / var_s)
    if scale <= 0:
        raise AlignmentError("alignment produced a non-positive scale")
    t = mu_d - scale * r @ mu_s
    return SimilarityTransform(scale, RigidPose(r, t))


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Rotation matrix of an axis-angle vector (angle = vector norm)."""
    v = np.asarray(axis_angle, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(v)
    if theta < 1e-12:
        return np.eye(3) + skew(v)
    a = v / theta
    k = skew(a)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
