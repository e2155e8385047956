"""Global surfel model: depth scaling, splat rendering of model views,
frame-to-model registration (joint point-to-plane + photometric cost,
coarse-to-fine Gauss-Newton), and projective surfel integration.

Conventions: surfel positions/normals live in the world frame; rendered
normal rasters are expressed in the render camera frame; depth rasters use
0 as the invalid value. Surfel normals are oriented toward the cameras
that observed them (camera-frame nz < 0 at estimation time).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RegistrationFailure
from .evaluation import PointCloud
from .geometry import CameraIntrinsics, RigidPose, rodrigues
from .matching import to_grayscale
from .pyramid import intrinsics_pyramid

_INDEX_NONE = -1
_KEY_NONE = np.int64(1) << np.int64(62)


@dataclass(frozen=True)
class FusionParams:
    """Thresholds for rendering, registration and surfel association."""

    depth_scale: float = 1.0
    assoc_depth_fraction: float = 0.05
    assoc_normal_deg: float = 20.0
    photometric_weight: float = 0.1
    icp_iterations: tuple[int, ...] = (4, 5, 10)  # coarsest level first
    convergence_delta: float = 1e-6
    min_inlier_fraction: float = 0.2
    gate_depth_fraction: float = 0.1
    gate_normal_deg: float = 45.0
    gate_texel_fraction: float = 0.02
    initial_confidence: float = 1.0
    max_splat_radius: int = 32
    min_export_confidence: float = 0.0

    def __post_init__(self) -> None:
        if self.depth_scale <= 0:
            raise ConfigError("depth scale must be positive")
        if not 0 < self.assoc_depth_fraction < 1:
            raise ConfigError("association depth fraction must be in (0, 1)")
        if not 0 < self.assoc_normal_deg < 90:
            raise ConfigError("association normal angle must be in (0, 90)")
        if self.photometric_weight < 0:
            raise ConfigError("photometric weight must be non-negative")
        if len(self.icp_iterations) < 1 or min(self.icp_iterations) < 1:
            raise ConfigError("need at least one iteration per level")
        if not 0 <= self.min_inlier_fraction <= 1:
            raise ConfigError("inlier fraction must be in [0, 1]")
        if self.gate_depth_fraction <= 0 or not 0 < self.gate_normal_deg <= 90:
            raise ConfigError("invalid registration gates")
        if self.gate_texel_fraction <= 0:
            raise ConfigError("texel spread gate must be positive")
        if self.initial_confidence <= 0:
            raise ConfigError("initial confidence must be positive")
        if self.max_splat_radius < 1:
            raise ConfigError("splat radius cap must be at least 1")

    @property
    def levels(self) -> int:
        return len(self.icp_iterations)


@dataclass(frozen=True)
class Surfel:
    """Read-only view of one model element."""

    position: np.ndarray
    normal: np.ndarray
    radius: float
    color: np.ndarray
    confidence: float
    last_seen: int


@dataclass
class RgbdFrame:
    """One fused-pipeline input: color, scaled depth, normals, intrinsics."""

    color: np.ndarray
    depth: np.ndarray
    normals: np.ndarray
    intrinsics: CameraIntrinsics
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        h, w = self.depth.shape
        if self.color.shape[:2] != (h, w) or self.normals.shape != (h, w, 3):
            raise ValueError("frame rasters must share dimensions")
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise ValueError("raster size does not match intrinsics")


@dataclass
class SurfelMap:
    """Unordered surfel collection stored as parallel arrays."""

    params: FusionParams = field(default_factory=FusionParams)
    positions: np.ndarray = field(
        default_factory=lambda: np.empty((0, 3), dtype=np.float64))
    normals: np.ndarray = field(
        default_factory=lambda: np.empty((0, 3), dtype=np.float64))
    radii: np.ndarray = field(
        default_factory=lambda: np.empty(0, dtype=np.float64))
    colors: np.ndarray = field(
        default_factory=lambda: np.empty((0, 3), dtype=np.float64))
    confidences: np.ndarray = field(
        default_factory=lambda: np.empty(0, dtype=np.float64))
    last_seen: np.ndarray = field(
        default_factory=lambda: np.empty(0, dtype=np.int64))
    frame_counter: int = 0

    def __len__(self) -> int:
        return self.positions.shape[0]

    def surfel(self, i: int) -> Surfel:
        return Surfel(self.positions[i].copy(), self.normals[i].copy(),
                      float(self.radii[i]), self.colors[i].copy(),
                      float(self.confidences[i]), int(self.last_seen[i]))

    def _append(self, pos, nrm, rad, col, conf, seen) -> None:
        self.positions = np.concatenate([self.positions, pos])
        self.normals = np.concatenate([self.normals, nrm])
        self.radii = np.concatenate([self.radii, rad])
        self.colors = np.concatenate([self.colors, col])
        self.confidences = np.concatenate([self.confidences, conf])
        self.last_seen = np.concatenate([self.last_seen, seen])


def scale_depth(depth: np.ndarray, s: float) -> np.ndarray:
    """Multiply valid depths by s; invalid pixels stay invalid."""
    if s <= 0:
        raise ConfigError("depth scale must be positive")
    out = np.array(depth, dtype=np.float32)
    valid = out > 0
    out[valid] = out[valid] * np.float32(s)
    return out


def _pixel_rays(k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    xs = (np.arange(k.width, dtype=np.float64) - k.cx) / k.fx
    ys = (np.arange(k.height, dtype=np.float64) - k.cy) / k.fy
    return np.meshgrid(xs, ys)


def _camera_points(depth: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    gx, gy = _pixel_rays(k)
    d = depth.astype(np.float64)
    return np.stack([gx * d, gy * d, d], axis=2)


def _disc_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dy * dy + dx * dx <= r * r
    return np.stack([dy[keep], dx[keep], (dy * dy + dx * dx)[keep]], axis=1)


def _project_surfel_index(smap: SurfelMap, pose: RigidPose,
                          k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project surfel centers to single pixels: (depth, index) rasters.

    No disc inflation; per pixel the nearest center wins, ties by lowest
    index. Used for integration ownership, where a surfel must stay
    reachable from the pixel it projects to.
    """
    h, w = k.height, k.width
    depth_r = np.zeros((h, w), dtype=np.float64)
    index_r = np.full((h, w), _INDEX_NONE, dtype=np.int64)
    n = len(smap)
    if n == 0:
        return depth_r, index_r
    pc = pose.invert().apply(smap.positions)
    z = pc[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    px = np.rint(k.fx * pc[:, 0] / zs + k.cx).astype(np.int64)
    py = np.rint(k.fy * pc[:, 1] / zs + k.cy).astype(np.int64)
    ok = front & (px >= 0) & (px < w) & (py >= 0) & (py < h)
    ids = np.nonzero(ok)[0]
    if ids.size == 0:
        return depth_r, index_r
    pid = py[ids] * w + px[ids]
    zbuf = np.full(h * w, np.inf)
    np.minimum.at(zbuf, pid, z[ids])
    keep = z[ids] <= zbuf[pid]
    kbuf = np.full(h * w, _KEY_NONE, dtype=np.int64)
    np.minimum.at(kbuf, pid[keep], ids[keep])
    hit = kbuf < _KEY_NONE
    win = kbuf[hit]
    depth_r.reshape(-1)[hit] = z[win]
    index_r.reshape(-1)[hit] = win
    return depth_r, index_r


def render_model_view(smap: SurfelMap, pose: RigidPose, k: CameraIntrinsics):
    """Splat the model into a virtual camera.

    Each surfel covers a disc whose pixel radius is max(1, f*radius/depth);
    the nearest surfel wins each pixel's normal and index (ties within 1%
    depth resolved by disc-center proximity, then by surfel index, so
    rendering is deterministic), while color is a footprint-weighted blend
    of every surfel inside the 1% depth band. Returns (depth f32, color u8,
    camera-frame normal f32, surfel index i64) rasters; invalid pixels have
    depth 0 and index -1.
    """
    h, w = k.height, k.width
    depth_r = np.zeros((h, w), dtype=np.float32)
    color_r = np.zeros((h, w, 3), dtype=np.uint8)
    normal_r = np.zeros((h, w, 3), dtype=np.float32)
    index_r = np.full((h, w), _INDEX_NONE, dtype=np.int64)
    n = len(smap)
    if n == 0:
        return depth_r, color_r, normal_r, index_r

    inv = pose.invert()
    pc = inv.apply(smap.positions)
    z = pc[:, 2]
    front = z > 1e-9
    f = 0.5 * (k.fx + k.fy)
    u = np.where(front, k.fx * pc[:, 0] / np.where(front, z, 1.0) + k.cx, -1.0)
    v = np.where(front, k.fy * pc[:, 1] / np.where(front, z, 1.0) + k.cy, -1.0)
    rpx = np.ones(n, dtype=np.int64)
    rpx[front] = np.clip(np.rint(f * smap.radii[front] / z[front]).astype(np.int64),
                         1, smap.params.max_splat_radius)
    px = np.rint(u).astype(np.int64)
    py = np.rint(v).astype(np.int64)
    vis = (front & (px + rpx >= 0) & (px - rpx < w)
           & (py + rpx >= 0) & (py - rpx < h))
    ids = np.nonzero(vis)[0]
    if ids.size == 0:
        return depth_r, color_r, normal_r, index_r

    # camera-frame surfel planes for per-pixel depth evaluation
    nc = smap.normals @ pose.rotation
    pe = np.sum(nc * pc, axis=1)
    frpx = f * smap.radii / np.maximum(z, 1e-9)

    # expand discs, grouped by radius so offset tables are shared
    ent_pid = []
    ent_sid = []
    ent_spill = []
    ent_z = []
    ent_d2 = []
    ent_core = []
    for r in np.unique(rpx[ids]):
        sel = ids[rpx[ids] == r]
        off = _disc_offsets(r)
        ty = (py[sel][:, None] + off[None, :, 0]).ravel()
        tx = (px[sel][:, None] + off[None, :, 1]).ravel()
        sid = np.repeat(sel, off.shape[0])
        spill = np.tile(off[:, 2], sel.size)
        inb = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
        tyb = ty[inb]
        txb = tx[inb]
        sidb = sid[inb]
        # depth at each covered pixel is the surfel plane cut along that
        # pixel's ray, not the center z: a constant-z splat would shift by
        # up to half a pixel of slope as the disc center snaps to the grid
        rx = (txb - k.cx) / k.fx
        ry = (tyb - k.cy) / k.fy
        den = nc[sidb, 0] * rx + nc[sidb, 1] * ry + nc[sidb, 2]
        zc = z[sidb]
        good = np.abs(den) > 1e-6
        ze = np.where(good, pe[sidb] / np.where(good, den, 1.0), zc)
        # two footprint tests keep a splat inside the surface it samples:
        # the cut must land on the surfel disc in 3D, and the pixel must
        # sit inside the center projection's own footprint window, else a
        # splat crossing a silhouette drags the foreground plane over
        # background pixels that no nearby true depth can explain
        ddx = ze * rx - pc[sidb, 0]
        ddy = ze * ry - pc[sidb, 1]
        ddz = ze - zc
        ondisc = ddx * ddx + ddy * ddy + ddz * ddz \
            <= (1.1 * smap.radii[sidb]) ** 2
        d2 = (u[sidb] - txb) ** 2 + (v[sidb] - tyb) ** 2
        rwin = np.maximum(0.8, frpx[sidb] - 0.7)
        ondisc &= d2 <= rwin * rwin
        ze = np.clip(ze, zc * 0.95, zc * 1.05)  # grazing planes shoot far
        ent_pid.append(tyb * w + txb)
        ent_sid.append(sidb)
        ent_spill.append(spill[inb])
        ent_z.append(ze)
        ent_d2.append(d2)
        ent_core.append(ondisc)
    pid = np.concatenate(ent_pid)
    sid = np.concatenate(ent_sid)
    spill = np.concatenate(ent_spill)
    ze = np.concatenate(ent_z)
    d2 = np.concatenate(ent_d2)
    core = np.concatenate(ent_core)
    if not core.any():
        return depth_r, color_r, normal_r, index_r

    zbuf = np.full(h * w, np.inf)
    np.minimum.at(zbuf, pid[core], ze[core])
    keep = ze <= zbuf[pid] * 1.01
    pid = pid[keep]
    sid = sid[keep]
    spill = spill[keep]
    ze = ze[keep]
    d2 = d2[keep]
    core = core[keep]

    key = spill.astype(np.int64) * n + sid
    kbuf = np.full(h * w, _KEY_NONE, dtype=np.int64)
    np.minimum.at(kbuf, pid[core], key[core])
    hit = kbuf < _KEY_NONE
    win = (kbuf[hit] % n).astype(np.int64)

    flat_depth = depth_r.reshape(-1)
    # depth is the winner's own plane cut, with the z-band only deciding
    # occlusion: the band minimum belongs to whichever in-band plane shoots
    # nearest, which undercuts true depth at convex creases, while in-band
    # surfels of one smooth surface all cut the ray at nearly the same depth
    iswin = core & (key == kbuf[pid])
    zwin = np.zeros(h * w)
    zwin[pid[iswin]] = ze[iswin]
    flat_depth[hit] = zwin[hit].astype(np.float32)
    # color blends every in-band contribution with a gaussian footprint
    # weight, including splats outside the core window: a single winner's
    # color jumps each time the argmin flips, which feeds pose-correlated
    # noise into any consumer comparing intensities across nearby viewpoints
    wgt = np.exp(d2 * (-1.0 / (2.0 * 0.7 ** 2)))
    wsum = np.bincount(pid, weights=wgt, minlength=h * w)
    csum = np.empty((h * w, 3))
    for c in range(3):
        csum[:, c] = np.bincount(pid, weights=wgt * smap.colors[sid, c],
                                 minlength=h * w)
    color_r.reshape(-1, 3)[hit] = np.clip(
        np.rint(csum[hit] / wsum[hit, None]), 0, 255).astype(np.uint8)
    normal_r.reshape(-1, 3)[hit] = (smap.normals[win] @ pose.rotation).astype(np.float32)
    index_r.reshape(-1)[hit] = win
    return depth_r, color_r, normal_r, index_r


def _bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = img.shape
    # clamp the base texel first so the fraction stays consistent with it
    # (a sample at exactly w-1 must read column w-1, not w-2)
    x0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
    ax = u - x0
    ay = v - y0
    i00 = img[y0, x0]
    i01 = img[y0, x0 + 1]
    i10 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    v0 = i00 * (1.0 - ax) + i01 * ax
    v1 = i10 * (1.0 - ax) + i11 * ax
    return v0 * (1.0 - ay) + v1 * ay


def _image_gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    gy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])
    return gx, gy


def _texel_spread(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Max minus min over the 2x2 bilinear footprint."""
    h, w = img.shape
    x0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
    i00 = img[y0, x0]
    i01 = img[y0, x0 + 1]
    i10 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    lo = np.minimum(np.minimum(i00, i01), np.minimum(i10, i11))
    hi = np.maximum(np.maximum(i00, i01), np.maximum(i10, i11))
    return hi - lo


def _gradient_support(valid: np.ndarray) -> np.ndarray:
    """1.0 where the centered-difference stencil stays on valid pixels."""
    good = valid.copy()
    good[:, 1:-1] &= valid[:, 2:] & valid[:, :-2]
    good[1:-1, :] &= valid[2:, :] & valid[:-2, :]
    good[:, [0, -1]] = False
    good[[0, -1], :] = False
    return good.astype(np.float64)


def register_frame(smap: SurfelMap, frame: RgbdFrame, init: RigidPose) -> RigidPose:
    """Refine the frame pose against the model rendered at init.

    Minimizes the sum of squared point-to-plane residuals plus
    photometric_weight times squared intensity residuals with Gauss-Newton.
    A convergence probe runs first at full resolution: when the very first
    increment is already below the convergence threshold (a frame that
    matches the rendered model, e.g. a re-fed view), init is returned
    unchanged. Otherwise the estimate is optimized coarse-to-fine. Raises
    RegistrationFailure when the model is empty, correspondences vanish,
    the normal equations are rank-deficient, or the final inlier fraction
    is below the configured minimum.
    """
    p = smap.params
    if len(smap) == 0:
        raise RegistrationFailure("cannot register against an empty model")
    levels = p.levels
    ks = intrinsics_pyramid(frame.intrinsics, levels)
    # even-pixel decimation: sample (2i, 2j) sits exactly on the coarse
    # pixel ray under the halved intrinsics, so coarse frame depths stay
    # comparable with coarse renders with no pooling bias
    fds = [frame.depth.astype(np.float64)]
    fns = [frame.normals.astype(np.float64)]
    fgs = [to_grayscale(frame.color).astype(np.float64) / 255.0]
    for _ in range(levels - 1):
        fds.append(fds[-1][::2, ::2])
        fns.append(fns[-1][::2, ::2])
        fgs.append(fgs[-1][::2, ::2])
    cos_gate = np.cos(np.radians(p.gate_normal_deg))
    lam = np.sqrt(p.photometric_weight)
    state = {"inliers": 0.0}

    def run_level(li: int, base: RigidPose, iterations: int,
                  probe: bool = False) -> tuple[RigidPose, bool]:
        # render at the current estimate so associations refresh per level;
        # the solved increment is left-applied in the base camera frame
        kl = ks[li]
        rdepth, rcolor, rnormal, _ = render_model_view(smap, base, kl)
        rgray = to_grayscale(rcolor).astype(np.float64) / 255.0
        rvalid = _gradient_support(rdepth > 0)
        rdep = rdepth.astype(np.float64)
        rdval = (rdepth > 0).astype(np.float64)
        ggx, ggy = _image_gradients(rgray)

        fd = fds[li]
        fn = fns[li]
        valid_f = (fd > 0) & (np.linalg.norm(fn, axis=2) > 0.5)
        if not np.any(valid_f):
            raise RegistrationFailure("frame has no valid depth")
        pts = _camera_points(fd, kl)[valid_f]
        nrm = fn[valid_f]
        inten = fgs[li][valid_f]
        fgx, fgy = _image_gradients(fgs[li])
        gxf = fgx[valid_f]
        gyf = fgy[valid_f]
        goodf = _gradient_support(fd > 0)[valid_f] > 0.5
        total_valid = pts.shape[0]

        local = RigidPose.identity()
        converged = False
        for _ in range(iterations):
            y = local.apply(pts)
            z = y[:, 2]
            ok = z > 1e-9
            u = np.where(ok, kl.fx * y[:, 0] / np.where(ok, z, 1.0) + kl.cx, -1.0)
            v = np.where(ok, kl.fy * y[:, 1] / np.where(ok, z, 1.0) + kl.cy, -1.0)
            ui = np.rint(u).astype(np.int64)
            vi = np.rint(v).astype(np.int64)
            ok &= (ui >= 0) & (ui < kl.width) & (vi >= 0) & (vi < kl.height)
            uis = np.where(ok, ui, 0)
            vis = np.where(ok, vi, 0)
            # anchor the model plane on the frame point's own ray at the
            # rendered depth, sampled bilinearly at the float projection:
            # the raster is piecewise planar, so interpolation recovers the
            # surface depth along this exact ray and the residual is free
            # of pixel-snap error on any viewing grid
            uf = np.clip(np.where(ok, u, 0.0), 0.0, kl.width - 1.0)
            vf = np.clip(np.where(ok, v, 0.0), 0.0, kl.height - 1.0)
            ok &= _bilinear(rdval, uf, vf) > 0.999999
            md = _bilinear(rdep, uf, vf)
            ok &= md > 0
            # points the model does not even cover from this view are
            # unobserved, not outliers; they leave the inlier denominator
            covered = int(np.count_nonzero(ok))
            # the footprint must lie on one surface sheet: interpolating
            # across a crease or silhouette blends unrelated depths
            ok &= _texel_spread(rdep, uf, vf) \
                <= p.gate_texel_fraction * np.maximum(md, 1e-9)
            mn = rnormal[vis, uis].astype(np.float64)
            m = y * (md / np.where(np.abs(z) > 1e-12, z, 1.0))[:, None]
            ok &= np.abs(z - md) <= p.gate_depth_fraction * md
            rn = nrm @ local.rotation.T
            ok &= np.sum(rn * mn, axis=1) >= cos_gate
            cnt = int(np.count_nonzero(ok))
            if cnt < 6:
                raise RegistrationFailure(
                    f"only {cnt} correspondences at level {li}")
            state["inliers"] = cnt / max(covered, 1)

            yk = y[ok]
            nk = mn[ok]
            r_g = np.sum(nk * (yk - m[ok]), axis=1)
            rows_g = np.concatenate([np.cross(yk, nk), nk], axis=1)
            # Huber reweighting keeps heavy-tailed depth noise from steering
            # the step; the scale floor leaves near-exact data untouched
            sig = max(1.4826 * float(np.median(np.abs(r_g))),
                      1e-6 * float(np.median(md[ok])))
            hub = np.minimum(1.0, 1.345 * sig / np.maximum(np.abs(r_g), 1e-300))
            wg = np.sqrt(hub)[:, None]
            r_g = r_g * wg[:, 0]
            rows_g = rows_g * wg

            if p.photometric_weight > 0:
                uo = u[ok]
                vo = v[ok]
                pin = ((uo >= 0) & (uo <= kl.width - 1)
                       & (vo >= 0) & (vo <= kl.height - 1))
                # drop samples whose gradient support touches background on
                # either image: silhouette texels pull with phantom gradients
                pin &= _bilinear(rvalid, uo, vo) > 0.999999
                pin &= goodf[ok]
                iv = _bilinear(rgray, uo, vo)
                # symmetric gradient (render at the warp, frame at the
                # pixel): one-sided gradients on hard-edged renders settle
                # where J'r = 0 is not the actual cost minimum
                gxv = 0.5 * (_bilinear(ggx, uo, vo) + gxf[ok])
                gyv = 0.5 * (_bilinear(ggy, uo, vo) + gyf[ok])
                zk = yk[:, 2]
                q = np.stack([
                    gxv * kl.fx / zk,
                    gyv * kl.fy / zk,
                    -(gxv * kl.fx * yk[:, 0] + gyv * kl.fy * yk[:, 1]) / (zk * zk),
                ], axis=1)
                r_p = (iv - inten[ok]) * lam
                rows_p = np.concatenate([np.cross(yk, q), q], axis=1) * lam
                a = np.concatenate([rows_g, rows_p[pin]])
                r = np.concatenate([r_g, r_p[pin]])
            else:
                a = rows_g
                r = r_g

            hmat = a.T @ a
            gvec = a.T @ r
            if not np.all(np.isfinite(hmat)):
                raise RegistrationFailure("non-finite normal equations")
            eig = np.linalg.eigvalsh(hmat)
            if eig[0] <= 1e-12 * max(eig[-1], 1e-300):
                raise RegistrationFailure("rank-deficient normal equations")
            delta = np.linalg.solve(hmat, -gvec)
            if np.linalg.norm(delta) < p.convergence_delta:
                converged = True
                break
            if probe:
                break
            step = RigidPose(rodrigues(delta[:3]), delta[3:])
            local = step.compose(local)
        return local, converged

    guess = RigidPose.identity()  # frame camera -> init camera
    _, settled = run_level(0, init, 1, probe=True)
    if not settled:
        for li in reversed(range(levels)):
            local, _ = run_level(li, init.compose(guess),
                                 p.icp_iterations[levels - 1 - li])
            guess = guess.compose(local)

    if state["inliers"] < p.min_inlier_fraction:
        raise RegistrationFailure(
            f"inlier fraction {state['inliers']:.3f} below "
            f"{p.min_inlier_fraction:.3f}")
    if settled:
        return init
    return init.compose(guess)


def integrate_frame(smap: SurfelMap, frame: RgbdFrame, pose: RigidPose) -> SurfelMap:
    """Fuse one frame into the model at the given world pose.

    Pixels whose rendered surfel agrees in depth and normal update that
    surfel by confidence-weighted averaging; the rest insert new surfels.
    Returns the same map object, updated in place.
    """
    p = smap.params
    k = frame.intrinsics
    fd = frame.depth.astype(np.float64)
    fn = frame.normals.astype(np.float64)
    valid = (fd > 0) & (np.linalg.norm(fn, axis=2) > 0.5)

    pts_w = pose.apply(_camera_points(fd, k)[valid])
    nrm_w = fn[valid] @ pose.rotation.T
    cols = frame.color[valid].astype(np.float64)
    depths = fd[valid]
    f = 0.5 * (k.fx + k.fy)
    seen = smap.frame_counter + 1

    assoc_idx = np.full(pts_w.shape[0], _INDEX_NONE, dtype=np.int64)
    if len(smap) > 0:
        # ownership pass: each surfel claims the pixel its center projects
        # to, nearest first. A pixel seeing its own surfel again associates
        # exactly even where a splat from a closer surface spills over it.
        pd, pidx = _project_surfel_index(smap, pose, k)
        rdepth, _, _, rindex = render_model_view(smap, pose, k)
        own = pidx[valid] >= 0
        ridx = np.where(own, pidx[valid], rindex[valid])
        rd = np.where(own, pd[valid], rdepth[valid]).astype(np.float64)
        cand = ridx >= 0
        safe = np.where(cand, ridx, 0)
        depth_ok = np.abs(depths - rd) < p.assoc_depth_fraction * np.where(rd > 0, rd, 1.0)
        cosg = np.cos(np.radians(p.assoc_normal_deg))
        normal_ok = np.sum(nrm_w * smap.normals[safe], axis=1) >= cosg
        assoc = cand & depth_ok & normal_ok
        assoc_idx[assoc] = ridx[assoc]

    hit = assoc_idx >= 0
    if np.any(hit):
        tgt = assoc_idx[hit]
        nsurf = len(smap)
        wsum = np.zeros(nsurf)
        np.add.at(wsum, tgt, 1.0)
        psum = np.zeros((nsurf, 3))
        np.add.at(psum, tgt, pts_w[hit])
        nsum = np.zeros((nsurf, 3))
        np.add.at(nsum, tgt, nrm_w[hit])
        csum = np.zeros((nsurf, 3))
        np.add.at(csum, tgt, cols[hit])
        touched = wsum > 0
        cw = smap.confidences[touched]
        tot = cw + wsum[touched]
        smap.positions[touched] = (
            cw[:, None] * smap.positions[touched] + psum[touched]) / tot[:, None]
        avg_n = cw[:, None] * smap.normals[touched] + nsum[touched]
        norms = np.linalg.norm(avg_n, axis=1, keepdims=True)
        good = norms[:, 0] > 1e-12
        avg_n = np.where(good[:, None], avg_n / np.maximum(norms, 1e-300),
                         smap.normals[touched])
        smap.normals[touched] = avg_n
        smap.colors[touched] = (
            cw[:, None] * smap.colors[touched] + csum[touched]) / tot[:, None]
        smap.confidences[touched] = tot
        smap.last_seen[touched] = seen

    new = ~hit
    if np.any(new):
        smap._append(
            pts_w[new],
            nrm_w[new],
            depths[new] * np.sqrt(2.0) / f,
            cols[new],
            np.full(int(np.count_nonzero(new)), p.initial_confidence),
            np.full(int(np.count_nonzero(new)), seen, dtype=np.int64),
        )
    smap.frame_counter = seen
    return smap


def export_cloud(smap: SurfelMap, min_confidence: float = 0.0) -> PointCloud:
    """Positions, colors and normals of surfels at or above the threshold."""
    sel = smap.confidences >= min_confidence
    normals = smap.normals[sel]
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / np.maximum(norms, 1e-300)
    return PointCloud(
        smap.positions[sel],
        np.clip(np.rint(smap.colors[sel]), 0, 255).astype(np.uint8),
        normals,
    )
