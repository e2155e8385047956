"""Cost-volume regularization and hierarchical depth estimation.

Semi-global aggregation runs over per-pixel hypothesis windows, so the same
scan kernel serves full volumes and locally windowed ones. The
surface-normal-aware variant shifts each path's zero-penalty transition by
the expected per-step plane-index change of the local tangent plane, which
removes the fronto-parallel bias on slanted surfaces.

The hierarchical driver ties the stages together: full sweep plus standard
aggregation at the coarsest pyramid level, then per level a locally windowed
sweep around the upsampled prior with normal-shifted aggregation, winner
extraction and masked median filtering; at the finest level low-texture
pixels are removed with a difference-of-Gaussians mask before the final
normal and confidence maps are computed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter

from . import kernels
from .errors import ConfigError
from .geometry import CameraIntrinsics
from .matching import (
    CostVolume,
    DepthRange,
    PlaneSet,
    generate_plane_set,
    local_sweep,
    sweep_cost_volume,
    to_grayscale,
)
from .pyramid import gaussian_pyramid, intrinsics_pyramid, upsample_nearest
from .sampler import ImageBundle, Keyframe

INVALID_CONFIDENCE = -1.0
_SHIFT_CLAMP = 2


@dataclass(frozen=True)
class SgmParams:
    """Path-aggregation penalties; p1 for one-step label changes, p2
    (>= p1) for larger jumps."""

    p1: int = 24
    p2: int = 96
    path_count: int = 8

    def __post_init__(self) -> None:
        if not (0 <= self.p1 <= self.p2):
            raise ConfigError("need 0 <= p1 <= p2")
        if self.path_count not in (4, 8):
            raise ConfigError("path_count must be 4 or 8")


@dataclass(frozen=True)
class DepthParams:
    """Configuration of the hierarchical depth estimator."""

    min_depth: float = 1.0
    max_depth: float = 100.0
    levels: int = 3
    census_window: int = 5
    p1: int = 24
    p2: int = 96
    path_count: int = 8
    half_width: int = 4
    max_step_px: float = 1.0
    median_window: int = 5
    dog_sigma: float = 1.0
    dog_ratio: float = 1.6
    dog_threshold: float = 4.0
    surface_normal_shifts: bool = True

    def __post_init__(self) -> None:
        if not (0.0 < self.min_depth < self.max_depth):
            raise ConfigError("need 0 < min_depth < max_depth")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.half_width < 1:
            raise ConfigError("half_width must be >= 1")
        if self.median_window % 2 == 0 or self.median_window < 3:
            raise ConfigError("median_window must be odd and >= 3")
        if self.dog_sigma <= 0.0 or self.dog_ratio <= 1.0:
            raise ConfigError("need dog_sigma > 0 and dog_ratio > 1")
        if self.max_step_px <= 0.0:
            raise ConfigError("max_step_px must be positive")
        self.sgm()  # penalty/path validation

    def sgm(self) -> SgmParams:
        return SgmParams(p1=self.p1, p2=self.p2, path_count=self.path_count)

    def depth_range(self) -> DepthRange:
        return DepthRange(self.min_depth, self.max_depth)


@dataclass
class DepthEstimate:
    """Per-reference-frame output triple.

    depth: float32, invalid = 0. normals: float32 (h, w, 3) unit vectors in
    the reference camera frame with negative z, invalid = zeros. confidence:
    float32 in [0, 1], invalid = -1.
    """

    depth: np.ndarray
    normals: np.ndarray
    confidence: np.ndarray


def sgm_aggregate(volume: CostVolume, params: SgmParams) -> CostVolume:
    """Sum of directional path costs over the volume's hypothesis windows."""
    agg = kernels.sgm_scan(volume.costs, volume.offsets, volume.counts,
                           params.p1, params.p2, params.path_count, None)
    return CostVolume(costs=agg, offsets=volume.offsets, counts=volume.counts,
                      valid=volume.valid, planes=volume.planes, aggregated=True)


def _pixel_rays(k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    vx = (np.arange(k.width, dtype=np.float64) - k.cx) / k.fx
    vy = (np.arange(k.height, dtype=np.float64) - k.cy) / k.fy
    return np.meshgrid(vx, vy)


def normal_shift_map(prior_depth: np.ndarray, prior_normals: np.ndarray,
                     planes: PlaneSet, k: CameraIntrinsics,
                     path_count: int) -> np.ndarray:
    """Per-direction zero-transition shifts from a tangent-plane prior.

    For pixel p with prior depth d and normal n, the ray of the path
    predecessor q = p - r is intersected with the tangent plane through p's
    back-projection; the shift is the plane-index difference between that
    intersection depth and d, rounded and clamped to +-2. Pixels with an
    invalid prior (or a grazing/behind intersection) use shift 0.
    """
    h, w = prior_depth.shape
    d = np.asarray(prior_depth, dtype=np.float64)
    n = np.asarray(prior_normals, dtype=np.float64)
    vx, vy = _pixel_rays(k)
    norm = np.linalg.norm(n, axis=2)
    has_prior = (d > 0.0) & (norm > 0.5)

    # n . X for the tangent plane through X = d * (vx, vy, 1)
    n_dot_x = d * (n[:, :, 0] * vx + n[:, :, 1] * vy + n[:, :, 2])
    fidx_p = planes.fractional_index(d)

    shifts = np.zeros((path_count, h, w), dtype=np.int8)
    for i in range(path_count):
        dy, dx = kernels.SGM_DIRECTIONS[i]
        den = (n[:, :, 0] * (vx - dx / k.fx)
               + n[:, :, 1] * (vy - dy / k.fy)
               + n[:, :, 2])
        with np.errstate(divide="ignore", invalid="ignore"):
            z_q = n_dot_x / den
        ok = has_prior & np.isfinite(z_q) & (z_q > 0.0)
        delta = planes.fractional_index(np.where(ok, z_q, 1.0)) - fidx_p
        s = np.clip(np.rint(delta), -_SHIFT_CLAMP, _SHIFT_CLAMP).astype(np.int8)
        shifts[i] = np.where(ok, s, 0)
    return shifts


def sgm_sn_aggregate(volume: CostVolume, params: SgmParams,
                     prior_normals: np.ndarray, prior_depth: np.ndarray,
                     planes: PlaneSet, k: CameraIntrinsics) -> CostVolume:
    """Path aggregation with surface-normal-shifted zero transitions."""
    shifts = normal_shift_map(prior_depth, prior_normals, planes, k,
                              params.path_count)
    agg = kernels.sgm_scan(volume.costs, volume.offsets, volume.counts,
                           params.p1, params.p2, params.path_count, shifts)
    return CostVolume(costs=agg, offsets=volume.offsets, counts=volume.counts,
                      valid=volume.valid, planes=volume.planes, aggregated=True)


def wta_extract(volume: CostVolume, planes: PlaneSet | None = None) -> np.ndarray:
    """Winner-takes-all depth: per pixel the minimum-cost plane.

    Ties break toward the smallest plane index (farthest depth). Pixels
    without any finite hypothesis are invalid (0).
    """
    if planes is None:
        planes = volume.planes
    h, w, kslots = volume.costs.shape
    slot = np.arange(kslots, dtype=np.int64)
    used = slot[None, None, :] < volume.counts[:, :, None]
    big = np.int64(1) << 40
    masked = np.where(used, volume.costs.astype(np.int64), big)
    j = np.argmin(masked, axis=2)
    g = volume.offsets.astype(np.int64) + j
    depth = planes.depths[g].astype(np.float32)
    depth[volume.valid == 0] = 0.0
    return depth


def median_filter(depth: np.ndarray, window: int = 5) -> np.ndarray:
    """Median over a window of valid depths; needs a majority to stay valid.

    Invalid pixels are excluded from the window; outputs with fewer than
    (window^2)//2 + 1 valid samples become invalid. Borders use the clipped
    window, so corner pixels can never reach the quorum.
    """
    d = np.asarray(depth, dtype=np.float64)
    min_valid = (window * window) // 2 + 1
    out, ok = kernels.median_filter_masked(d, (d > 0).astype(np.uint8),
                                           window, min_valid)
    result = out.astype(np.float32)
    result[ok == 0] = 0.0
    return result


def dog_mask(image: np.ndarray, sigma: float = 1.0, ratio: float = 1.6,
             threshold: float = 4.0) -> np.ndarray:
    """Texture mask: True where the difference-of-Gaussians response
    reaches the threshold (in intensity units)."""
    if sigma <= 0.0 or ratio <= 1.0:
        raise ValueError("need sigma > 0 and ratio > 1")
    img = np.asarray(image, dtype=np.float64)
    g1 = gaussian_filter(img, sigma, mode="reflect", truncate=3.0)
    g2 = gaussian_filter(img, sigma * ratio, mode="reflect", truncate=3.0)
    return np.abs(g1 - g2) >= threshold


def normals_from_depth(depth: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Unit normals from central differences of the back-projected depth.

    A pixel's normal needs all four direct neighbors valid; the result is
    oriented toward the camera (negative z) and zero where invalid.
    """
    d = np.asarray(depth, dtype=np.float64)
    h, w = d.shape
    valid = d > 0.0
    vx, vy = _pixel_rays(k)
    pts = np.stack([vx * d, vy * d, d], axis=2)

    normals = np.zeros((h, w, 3), dtype=np.float64)
    if h < 3 or w < 3:
        return normals.astype(np.float32)

    tx = pts[1:-1, 2:] - pts[1:-1, :-2]
    ty = pts[2:, 1:-1] - pts[:-2, 1:-1]
    ok = (valid[1:-1, 2:] & valid[1:-1, :-2]
          & valid[2:, 1:-1] & valid[:-2, 1:-1])

    n = np.cross(tx, ty)
    nz = n[:, :, 2]
    n = np.where((nz > 0.0)[:, :, None], -n, n)
    norm = np.linalg.norm(n, axis=2)
    ok &= (norm > 0.0) & (n[:, :, 2] < 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = n / norm[:, :, None]
    normals[1:-1, 1:-1] = np.where(ok[:, :, None], unit, 0.0)
    return normals.astype(np.float32)


def _smooth_prior_normals(normals: np.ndarray, window: int = 5) -> np.ndarray:
    """Box-average a normal field and renormalize.

    Normals derived from quantized winner-take-all depth alternate between
    tread and riser orientations; averaging recovers the underlying tangent
    before the field seeds the next level's transition shifts. Pixels whose
    window holds no valid normal (or where opposite normals cancel) stay
    zero, which downstream consumers treat as no-prior.
    """
    n = np.asarray(normals, dtype=np.float64)
    acc = np.empty_like(n)
    for c in range(3):
        acc[:, :, c] = uniform_filter(n[:, :, c], size=window, mode="nearest")
    norm = np.linalg.norm(acc, axis=2)
    ok = norm > 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = acc / norm[:, :, None]
    return np.where(ok[:, :, None], unit, 0.0).astype(np.float32)


def confidence_from_volume(volume: CostVolume) -> np.ndarray:
    """Distinctiveness of the winning hypothesis: 1 - best/second-best.

    Pixels with fewer than two hypotheses score 0; pixels with no finite
    hypothesis at all are invalid (-1).
    """
    h, w, kslots = volume.costs.shape
    conf = np.zeros((h, w), dtype=np.float64)
    if kslots >= 2:
        slot = np.arange(kslots, dtype=np.int64)
        used = slot[None, None, :] < volume.counts[:, :, None]
        big = np.int64(1) << 40
        masked = np.where(used, volume.costs.astype(np.int64), big)
        part = np.partition(masked, 1, axis=2)
        best = part[:, :, 0].astype(np.float64)
        second = part[:, :, 1].astype(np.float64)
        two = (volume.counts >= 2) & (second > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = 1.0 - best / second
        conf = np.where(two, ratio, 0.0)
    conf[volume.valid == 0] = INVALID_CONFIDENCE
    return conf.astype(np.float32)


def _level_bundle(bundle: ImageBundle, grays: list[np.ndarray],
                  k: CameraIntrinsics) -> ImageBundle:
    frames = [Keyframe(f.frame_id, f.timestamp, g, f.pose)
              for f, g in zip(bundle.frames, grays)]
    return ImageBundle(frames, k)


def hierarchical_estimate(bundle: ImageBundle, depth_range: DepthRange,
                          params: DepthParams) -> DepthEstimate:
    """Coarse-to-fine depth, normal and confidence maps for a bundle."""
    levels = params.levels
    sgm_p = params.sgm()
    ks = intrinsics_pyramid(bundle.intrinsics, levels)
    pyrs = [gaussian_pyramid(to_grayscale(f.image), levels)
            for f in bundle.frames]
    poses = [f.pose for f in bundle.frames]

    prior_depth: np.ndarray | None = None
    prior_normals: np.ndarray | None = None
    for level in range(levels - 1, -1, -1):
        kl = ks[level]
        lvl_bundle = _level_bundle(bundle, [p[level] for p in pyrs], kl)
        planes = generate_plane_set(kl, poses, depth_range, params.max_step_px)
        if prior_depth is None:
            vol = sweep_cost_volume(lvl_bundle, planes, params.census_window)
            agg = sgm_aggregate(vol, sgm_p)
        else:
            shape = (kl.height, kl.width)
            up_depth = upsample_nearest(prior_depth, shape)
            up_normals = upsample_nearest(prior_normals, shape)
            vol = local_sweep(lvl_bundle, up_depth, params.half_width, planes,
                              params.census_window)
            if params.surface_normal_shifts:
                agg = sgm_sn_aggregate(vol, sgm_p, up_normals, up_depth,
                                       planes, kl)
            else:
                agg = sgm_aggregate(vol, sgm_p)
        depth = wta_extract(agg)
        depth = median_filter(depth, params.median_window)
        if level == 0:
            ref_gray = lvl_bundle.reference.image.astype(np.float64)
            texture = dog_mask(ref_gray, params.dog_sigma, params.dog_ratio,
                               params.dog_threshold)
            depth = np.where(texture, depth, np.float32(0.0)).astype(np.float32)
            normals = normals_from_depth(depth, kl)
            conf = confidence_from_volume(agg)
            conf = np.where(depth > 0, conf, np.float32(INVALID_CONFIDENCE))
            return DepthEstimate(depth=depth, normals=normals,
                                 confidence=conf.astype(np.float32))
        prior_depth = depth
        prior_normals = _smooth_prior_normals(normals_from_depth(depth, kl))
    raise AssertionError("unreachable")
