"""Evaluation protocol: trajectory ATE, median-scaled depth metrics,
staged point-cloud alignment, nearest-neighbor cloud RMSE, and the
cloud-preparation helpers (back-projection, outlier removal, voxel grid).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import AlignmentError, ConfigError, EvaluationError
from .geometry import (
    CameraIntrinsics,
    RigidPose,
    SimilarityTransform,
    Trajectory,
    rodrigues,
    umeyama_similarity,
)

DEFAULT_DEPTH_CAP = 300.0
_ICP_MAX_ITERS = 50
_ICP_DISTANCE_FRACTION = 0.05
_ICP_NORMAL_GATE_DEG = 45.0


@dataclass
class PointCloud:
    """World-frame points with optional per-point color and unit normal."""

    points: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if self.colors.shape[0] != self.points.shape[0]:
                raise ValueError("color count does not match point count")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if self.normals.shape[0] != self.points.shape[0]:
                raise ValueError("normal count does not match point count")
            norms = np.linalg.norm(self.normals, axis=1)
            if norms.size and np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError("normals must be unit length")

    def __len__(self) -> int:
        return self.points.shape[0]

    def select(self, mask: np.ndarray) -> "PointCloud":
        return PointCloud(
            self.points[mask],
            None if self.colors is None else self.colors[mask],
            None if self.normals is None else self.normals[mask],
        )

    def transformed(self, sim: SimilarityTransform) -> "PointCloud":
        normals = self.normals
        if normals is not None:
            normals = normals @ sim.rigid.rotation.T
        return PointCloud(sim.apply(self.points), self.colors, normals)


@dataclass(frozen=True)
class TrajectoryMetrics:
    rmse: float
    mae: float
    sigma: float


@dataclass(frozen=True)
class DepthMetrics:
    rmse: float
    mae: float
    delta_125: float
    delta_105: float


def _match_timestamps(est: Trajectory, gt: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Indices (est_idx, gt_idx) of nearest-timestamp pairs within half the
    ground-truth frame period."""
    ts_e = est.timestamps
    ts_g = gt.timestamps
    if ts_g.size > 1:
        tol = 0.5 * float(np.median(np.diff(ts_g)))
    else:
        tol = np.inf
    pos = np.searchsorted(ts_g, ts_e)
    lo = np.clip(pos - 1, 0, ts_g.size - 1)
    hi = np.clip(pos, 0, ts_g.size - 1)
    pick = np.where(np.abs(ts_g[hi] - ts_e) < np.abs(ts_g[lo] - ts_e), hi, lo)
    ok = np.abs(ts_g[pick] - ts_e) <= tol
    est_idx = np.nonzero(ok)[0]
    gt_idx = pick[ok]
    # keep at most one estimate per ground-truth pose: the closest one
    order = np.argsort(np.abs(ts_g[gt_idx] - ts_e[est_idx]), kind="stable")
    seen: dict[int, int] = {}
    for o in order:
        seen.setdefault(int(gt_idx[o]), int(est_idx[o]))
    gt_sel = np.fromiter(seen.keys(), dtype=np.int64, count=len(seen))
    est_sel = np.fromiter(seen.values(), dtype=np.int64, count=len(seen))
    order = np.argsort(est_sel)
    return est_sel[order], gt_sel[order]


def _matched_positions(est: Trajectory, gt: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    est_idx, gt_idx = _match_timestamps(est, gt)
    if est_idx.size < 3:
        raise EvaluationError(
            f"only {est_idx.size} matched poses; need at least 3")
    return est.positions()[est_idx], gt.positions()[gt_idx]


def trajectory_alignment(est: Trajectory, gt: Trajectory) -> SimilarityTransform:
    """Least-squares similarity mapping est positions onto gt."""
    p_est, p_gt = _matched_positions(est, gt)
    return umeyama_similarity(p_est, p_gt)


def ate_metrics(est: Trajectory, gt: Trajectory) -> TrajectoryMetrics:
    """Absolute trajectory error after least-squares similarity alignment."""
    p_est, p_gt = _matched_positions(est, gt)
    sim = umeyama_similarity(p_est, p_gt)
    err = np.linalg.norm(sim.apply(p_est) - p_gt, axis=1)
    return TrajectoryMetrics(
        rmse=float(np.sqrt(np.mean(err ** 2))),
        mae=float(np.mean(err)),
        sigma=float(np.std(err)),
    )


def depth_metrics(est: np.ndarray, gt: np.ndarray,
                  cap: float = DEFAULT_DEPTH_CAP) -> DepthMetrics:
    """Median-scaled depth errors over jointly valid pixels with gt <= cap."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise EvaluationError(
            f"depth map shapes differ: {est.shape} vs {gt.shape}")
    joint = (est > 0) & (gt > 0) & (gt <= cap)
    if not np.any(joint):
        raise EvaluationError("no jointly valid pixels")
    d_est = est[joint]
    d_gt = gt[joint]
    d_est = d_est * (np.median(d_gt) / np.median(d_est))
    diff = d_est - d_gt
    ratio = np.maximum(d_est / d_gt, d_gt / d_est)
    return DepthMetrics(
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        mae=float(np.mean(np.abs(diff) / d_gt)),
        delta_125=float(np.mean(ratio < 1.25)),
        delta_105=float(np.mean(ratio < 1.05)),
    )


def backproject_depth(depth: np.ndarray, color: np.ndarray | None,
                      k: CameraIntrinsics, pose: RigidPose) -> PointCloud:
    """Lift valid depth pixels to world points, carrying pixel colors."""
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    xs = (np.arange(w, dtype=np.float64) - k.cx) / k.fx
    ys = (np.arange(h, dtype=np.float64) - k.cy) / k.fy
    gx, gy = np.meshgrid(xs, ys)
    valid = depth > 0
    d = depth[valid]
    pts_cam = np.stack([gx[valid] * d, gy[valid] * d, d], axis=1)
    colors = None
    if color is not None:
        colors = np.asarray(color)[valid]
    return PointCloud(pose.apply(pts_cam), colors)


def estimate_normals(cloud: PointCloud, k: int = 16) -> PointCloud:
    """Per-point normals from a PCA plane fit over k nearest neighbors.

    Orientation is arbitrary (sign-consistent use requires |cos| tests).
    """
    pts = cloud.points
    n = len(cloud)
    if n < 3:
        raise EvaluationError("too few points for normal estimation")
    kk = min(k, n)
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=kk)
    neigh = pts[idx]  # (n, kk, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts.copy(), cloud.colors, normals)


def nearest_distances(est: PointCloud, gt: PointCloud) -> np.ndarray:
    """Distance from each estimated point to its nearest gt point."""
    if len(est) == 0 or len(gt) == 0:
        raise EvaluationError("empty point cloud")
    dist, _ = cKDTree(gt.points).query(est.points)
    return dist


def cloud_rmse(est: PointCloud, gt: PointCloud) -> float:
    """RMSE of each estimated point's distance to its nearest gt point."""
    dist = nearest_distances(est, gt)
    return float(np.sqrt(np.mean(dist ** 2)))


def _bbox_diagonal(pts: np.ndarray) -> float:
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


class _DivergenceGuard:
    """Raises once the tracked error grows for three consecutive steps."""

    def __init__(self, label: str) -> None:
        self.label = label
        self.prev = np.inf
        self.rising = 0

    def update(self, rmse: float) -> None:
        if rmse > self.prev:
            self.rising += 1
            if self.rising >= 3:
                raise AlignmentError(f"{self.label} diverged (rmse rising)")
        else:
            self.rising = 0
        self.prev = rmse


def _icp_point_to_plane(est_pts: np.ndarray, est_nrm: np.ndarray | None,
                        gt_pts: np.ndarray, gt_nrm: np.ndarray,
                        tree: cKDTree, max_dist: float) -> RigidPose:
    """Rigid ICP minimizing the point-to-plane error against gt."""
    total = RigidPose.identity()
    cur = est_pts
    cur_nrm = est_nrm
    cos_gate = np.cos(np.radians(_ICP_NORMAL_GATE_DEG))
    guard = _DivergenceGuard("point-to-plane ICP")
    for _ in range(_ICP_MAX_ITERS):
        dist, idx = tree.query(cur, distance_upper_bound=max_dist)
        ok = np.isfinite(dist)
        if cur_nrm is not None:
            safe = np.where(ok, idx, 0)
            agree = np.abs(np.sum(cur_nrm * gt_nrm[safe], axis=1)) >= cos_gate
            ok &= agree
        if np.count_nonzero(ok) < 6:
            raise AlignmentError("no valid correspondences for ICP")
        p = cur[ok]
        q = gt_pts[idx[ok]]
        n = gt_nrm[idx[ok]]
        guard.update(float(np.sqrt(np.mean(np.sum((p - q) ** 2, axis=1)))))
        a = np.concatenate([np.cross(p, n), n], axis=1)
        b = -np.sum(n * (p - q), axis=1)
        sol, *_ = np.linalg.lstsq(a, b, rcond=None)
        rot = rodrigues(sol[:3])
        step = RigidPose(rot, sol[3:])
        total = step.compose(total)
        cur = step.apply(cur)
        if cur_nrm is not None:
            cur_nrm = cur_nrm @ rot.T
        if np.linalg.norm(sol) < 1e-10:
            break
    return total


def _icp_with_scale(est_pts: np.ndarray, gt_pts: np.ndarray,
                    tree: cKDTree, max_dist: float) -> SimilarityTransform:
    """Point-to-point ICP estimating a similarity each iteration."""
    total = SimilarityTransform.identity()
    cur = est_pts
    guard = _DivergenceGuard("scaling ICP")
    prev_rmse = np.inf
    for _ in range(_ICP_MAX_ITERS):
        dist, idx = tree.query(cur, distance_upper_bound=max_dist)
        ok = np.isfinite(dist)
        if np.count_nonzero(ok) < 3:
            raise AlignmentError("no valid correspondences for scaling ICP")
        rmse = float(np.sqrt(np.mean(dist[ok] ** 2)))
        guard.update(rmse)
        step = umeyama_similarity(cur[ok], gt_pts[idx[ok]])
        total = step.compose(total)
        cur = step.apply(cur)
        if abs(prev_rmse - rmse) < 1e-12:
            break
        prev_rmse = rmse
    return total


def align_clouds(est: PointCloud, gt: PointCloud,
                 traj_sim: SimilarityTransform) -> tuple[PointCloud, SimilarityTransform]:
    """Three-stage model-to-ground-truth alignment.

    Applies the trajectory similarity, refines with rigid point-to-plane
    ICP, then with point-to-point ICP estimating a global scale. Returns
    the aligned cloud and the composite transform.
    """
    if len(est) == 0 or len(gt) == 0:
        raise AlignmentError("cannot align empty point clouds")
    if gt.normals is None:
        gt = estimate_normals(gt)
    max_dist = _ICP_DISTANCE_FRACTION * _bbox_diagonal(gt.points)
    if max_dist <= 0:
        raise AlignmentError("degenerate ground-truth cloud")
    tree = cKDTree(gt.points)

    rough = est.transformed(traj_sim)
    rigid = _icp_point_to_plane(rough.points, rough.normals,
                                gt.points, gt.normals, tree, max_dist)
    stage2 = SimilarityTransform(1.0, rigid).compose(traj_sim)
    mid = est.transformed(stage2)
    scaled = _icp_with_scale(mid.points, gt.points, tree, max_dist)
    composite = scaled.compose(stage2)
    return est.transformed(composite), composite


def statistical_outlier_removal(cloud: PointCloud, k: int = 100,
                                std_ratio: float = 1.0) -> PointCloud:
    """Drop points whose mean k-NN distance exceeds mu + std_ratio * sigma."""
    n = len(cloud)
    if n <= k:
        raise EvaluationError(f"need more than {k} points, got {n}")
    tree = cKDTree(cloud.points)
    dist, _ = tree.query(cloud.points, k=k + 1)
    mean_d = dist[:, 1:].mean(axis=1)  # column 0 is the point itself
    mu = mean_d.mean()
    sigma = mean_d.std()
    return cloud.select(~(mean_d > mu + std_ratio * sigma))


def voxel_downsample(cloud: PointCloud, voxel: float = 0.01) -> PointCloud:
    """One centroid per occupied voxel; grid anchored at the floor of the
    cloud's minimum corner. Colors and normals are averaged."""
    if voxel <= 0:
        raise ConfigError("voxel size must be positive")
    if len(cloud) == 0:
        return cloud
    pts = cloud.points
    anchor = np.floor(pts.min(axis=0))
    keys = np.floor((pts - anchor) / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True,
                                   return_counts=True)
    inverse = inverse.reshape(-1)
    m = counts.shape[0]

    def _mean(values: np.ndarray) -> np.ndarray:
        acc = np.zeros((m, values.shape[1]), dtype=np.float64)
        np.add.at(acc, inverse, values.astype(np.float64))
        return acc / counts[:, None]

    centroids = _mean(pts)
    colors = None
    if cloud.colors is not None:
        colors = np.clip(np.rint(_mean(cloud.colors)), 0, 255).astype(np.uint8)
    normals = None
    if cloud.normals is not None:
        normals = _mean(cloud.normals)
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        degenerate = norms[:, 0] < 1e-12
        normals = np.where(degenerate[:, None], [0.0, 0.0, 1.0],
                           normals / np.maximum(norms, 1e-300))
    return PointCloud(centroids, colors, normals)
