"""Multi-view matching cost construction.

A PlaneSet holds fronto-parallel depth hypotheses ordered far to near, spaced
so that stepping between consecutive planes never moves a warped image corner
by more than max_step_px in any matching view. Cost volumes store int32 census
costs per plane hypothesis plus per-pixel hypothesis windows (offset, count)
so local refinement sweeps and full sweeps share one layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, DegenerateGeometryError
from .geometry import CameraIntrinsics, RigidPose, plane_homography, relative_pose
from .sampler import ImageBundle

DEFAULT_CENSUS_WINDOW = 5
DEFAULT_MAX_STEP_PX = 1.0
_MAX_PLANES = 100000


@dataclass(frozen=True)
class DepthRange:
    near: float
    far: float

    def __post_init__(self) -> None:
        if not (0.0 < self.near < self.far):
            raise ValueError("need 0 < near < far")


@dataclass
class PlaneSet:
    """Plane depths in strictly descending order (far first)."""

    depths: np.ndarray

    def __post_init__(self) -> None:
        d = np.asarray(self.depths, dtype=np.float64)
        if d.ndim != 1 or d.size == 0:
            raise ValueError("depths must be a non-empty 1-d array")
        if d.size > 1 and not np.all(np.diff(d) < 0.0):
            raise ValueError("depths must be strictly descending")
        self.depths = d

    def __len__(self) -> int:
        return int(self.depths.size)

    def fractional_index(self, depth: np.ndarray) -> np.ndarray:
        """Real-valued plane index for arbitrary depths, clamped to the ends.

        Index 0 is the farthest plane, so the lookup runs over the reversed
        (ascending) depth array.
        """
        d = np.asarray(depth, dtype=np.float64)
        n = len(self)
        asc = self.depths[::-1]
        idx_asc = np.interp(d, asc, np.arange(n, dtype=np.float64))
        return (n - 1.0) - idx_asc

    def nearest_index(self, depth: np.ndarray) -> np.ndarray:
        return np.rint(self.fractional_index(depth)).astype(np.int64)


@dataclass
class CensusDescriptorMap:
    codes: np.ndarray
    valid: np.ndarray
    window: int


@dataclass
class CostVolume:
    """Census matching costs with per-pixel hypothesis windows.

    costs[y, x, j] is the cost of plane offsets[y, x] + j for
    j < counts[y, x]; remaining slots are zero and must be ignored. valid
    marks pixels with at least one finite (non-sentinel) hypothesis.
    """

    costs: np.ndarray
    offsets: np.ndarray
    counts: np.ndarray
    valid: np.ndarray
    planes: PlaneSet
    aggregated: bool = False

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.costs.shape  # type: ignore[return-value]


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """uint8 luma via the integer weights (77 R + 150 G + 29 B) >> 8."""
    img = np.asarray(image)
    if img.ndim == 2:
        if img.dtype != np.uint8:
            raise ValueError("grayscale input must be uint8")
        return img
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError("expected uint8 (h, w, 3) color or (h, w) gray")
    r = img[:, :, 0].astype(np.uint32)
    g = img[:, :, 1].astype(np.uint32)
    b = img[:, :, 2].astype(np.uint32)
    return ((77 * r + 150 * g + 29 * b) >> 8).astype(np.uint8)


def census_transform(image: np.ndarray,
                     window: int = DEFAULT_CENSUS_WINDOW,
                     valid: Optional[np.ndarray] = None) -> CensusDescriptorMap:
    """Census descriptor map of an image (color inputs are converted)."""
    if window % 2 == 0 or window < 3 or window * window - 1 > 32:
        raise ConfigError("census window must be odd, >= 3 and <= 5")
    img = np.asarray(image)
    if img.ndim == 3 or img.dtype == np.uint8:
        img = to_grayscale(img)
    gray = np.ascontiguousarray(img, dtype=np.float64)
    mask = None if valid is None else np.ascontiguousarray(valid, dtype=np.uint8)
    codes, ok = kernels.census_transform(gray, mask, window)
    return CensusDescriptorMap(codes=codes, valid=ok, window=window)


def hamming_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-element hamming distance between census code arrays."""
    return kernels.popcount32(np.bitwise_xor(np.asarray(a, dtype=np.uint32),
                                             np.asarray(b, dtype=np.uint32)))


def _corner_points(k: CameraIntrinsics) -> np.ndarray:
    w, h = float(k.width - 1), float(k.height - 1)
    return np.array([[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]], dtype=np.float64)


def _project_corners(hmat: np.ndarray, corners: np.ndarray) -> Optional[np.ndarray]:
    pts = np.concatenate([corners, np.ones((corners.shape[0], 1))], axis=1)
    mapped = pts @ hmat.T
    if np.any(mapped[:, 2] <= 0.0):
        return None
    return mapped[:, :2] / mapped[:, 2:3]


def _max_corner_step(k: CameraIntrinsics, rels: Sequence[RigidPose],
                     corners: np.ndarray, d_from: float, d_to: float) -> float:
    """Largest corner displacement (px) across views when switching planes."""
    worst = 0.0
    for rel in rels:
        h_from = plane_homography(k, rel, d_from)
        h_to = plane_homography(k, rel, d_to)
        p0 = _project_corners(h_from, corners)
        p1 = _project_corners(h_to, corners)
        if p0 is None or p1 is None:
            return np.inf
        disp = float(np.max(np.hypot(p1[:, 0] - p0[:, 0], p1[:, 1] - p0[:, 1])))
        worst = max(worst, disp)
    return worst


def generate_plane_set(k: CameraIntrinsics, bundle_poses: Sequence[RigidPose],
                       depth_range: DepthRange,
                       max_step_px: float = DEFAULT_MAX_STEP_PX) -> PlaneSet:
    """Fronto-parallel planes from far to near with bounded warp steps.

    bundle_poses are the absolute camera poses of a bundle; the middle one is
    the reference. Each next plane is found by bisection on inverse depth:
    the largest step from the current plane whose corner displacement stays
    within max_step_px in every matching view (a hair of slack, 1e-9 px,
    keeps exact-boundary geometries from splitting one step into two).
    All-zero baselines give no parallax and raise DegenerateGeometryError.
    """
    if max_step_px <= 0.0:
        raise ConfigError("max_step_px must be positive")
    poses = list(bundle_poses)
    if len(poses) < 2:
        raise ValueError("need at least two poses")
    ref = poses[len(poses) // 2]
    rels = [relative_pose(ref, p) for i, p in enumerate(poses) if i != len(poses) // 2]
    if max(float(np.linalg.norm(r.translation)) for r in rels) == 0.0:
        raise DegenerateGeometryError("zero baseline in every matching view")
    limit = max_step_px * (1.0 + 1e-9)
    corners = _corner_points(k)
    near, far = depth_range.near, depth_range.far
    depths = [far]
    cur = far
    while cur > near:
        if _max_corner_step(k, rels, corners, cur, near) <= limit:
            depths.append(near)
            break
        lo = 1.0 / cur  # step of zero pixels
        hi = 1.0 / near  # step beyond the limit
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _max_corner_step(k, rels, corners, cur, 1.0 / mid) <= limit:
                lo = mid
            else:
                hi = mid
        nxt = 1.0 / lo
        if not nxt < cur * (1.0 - 1e-12):
            raise DegenerateGeometryError("plane spacing made no progress")
        depths.append(nxt)
        cur = nxt
        if len(depths) > _MAX_PLANES:
            raise DegenerateGeometryError("plane count exploded")
    return PlaneSet(np.array(depths, dtype=np.float64))


def _bundle_grays(bundle: ImageBundle) -> tuple[np.ndarray, list[np.ndarray]]:
    ref = np.ascontiguousarray(to_grayscale(bundle.reference.image), dtype=np.float64)
    match = [np.ascontiguousarray(to_grayscale(f.image), dtype=np.float64)
             for f in bundle.matching]
    return ref, match


def _bundle_homographies(bundle: ImageBundle, planes: PlaneSet) -> np.ndarray:
    """(n_match, n_planes, 3, 3) pixel homographies reference -> match."""
    k = bundle.intrinsics
    ref_pose = bundle.reference.pose
    hmats = np.zeros((len(bundle.matching), len(planes), 3, 3), dtype=np.float64)
    for m, frame in enumerate(bundle.matching):
        rel = relative_pose(ref_pose, frame.pose)
        for g, depth in enumerate(planes.depths):
            hmats[m, g] = plane_homography(k, rel, float(depth))
    return hmats


def _volume_validity(costs: np.ndarray, counts: np.ndarray) -> np.ndarray:
    k = costs.shape[2]
    used = np.arange(k, dtype=np.int32)[None, None, :] < counts[:, :, None]
    finite = used & (costs < kernels.COST_SENTINEL)
    return np.any(finite, axis=2).astype(np.uint8)


def sweep_cost_volume(bundle: ImageBundle, planes: PlaneSet,
                      census_window: int = DEFAULT_CENSUS_WINDOW) -> CostVolume:
    """Full plane-sweep cost volume for a bundle's reference view."""
    ref_gray, match_grays = _bundle_grays(bundle)
    ref_census = census_transform(ref_gray, census_window)
    hmats = _bundle_homographies(bundle, planes)
    costs = kernels.sweep_full(ref_census.codes, ref_census.valid,
                               match_grays, hmats, census_window)
    h, w = ref_gray.shape
    offsets = np.zeros((h, w), dtype=np.int32)
    counts = np.full((h, w), len(planes), dtype=np.int32)
    return CostVolume(costs=costs, offsets=offsets, counts=counts,
                      valid=_volume_validity(costs, counts), planes=planes)


def local_window(planes: PlaneSet, prior_depth: np.ndarray,
                 half_width: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel plane windows around a depth prior.

    Windows are the intersection of [j* - half_width, j* + half_width] with
    the full plane range, so they shrink near the ends instead of shifting.
    Pixels without a prior fall back to the full range.
    """
    n = len(planes)
    prior = np.asarray(prior_depth, dtype=np.float64)
    has_prior = prior > 0.0
    j = planes.nearest_index(np.where(has_prior, prior, planes.depths[0]))
    lo = np.clip(j - half_width, 0, n - 1)
    hi = np.clip(j + half_width, 0, n - 1)
    offsets = np.where(has_prior, lo, 0).astype(np.int32)
    counts = np.where(has_prior, hi - lo + 1, n).astype(np.int32)
    return offsets, counts


def local_sweep(bundle: ImageBundle, prior_depth: np.ndarray, half_width: int,
                planes: PlaneSet,
                census_window: int = DEFAULT_CENSUS_WINDOW) -> CostVolume:
    """Plane sweep restricted to per-pixel windows around a depth prior."""
    if half_width < 1:
        raise ConfigError("half_width must be >= 1")
    ref_gray, match_grays = _bundle_grays(bundle)
    if prior_depth.shape != ref_gray.shape:
        raise ValueError("prior depth shape mismatch")
    ref_census = census_transform(ref_gray, census_window)
    hmats = _bundle_homographies(bundle, planes)
    offsets, counts = local_window(planes, prior_depth, half_width)
    costs = kernels.sweep_local(ref_census.codes, ref_census.valid,
                                match_grays, hmats, offsets, counts,
                                census_window)
    return CostVolume(costs=costs, offsets=offsets, counts=counts,
                      valid=_volume_validity(costs, counts), planes=planes)
