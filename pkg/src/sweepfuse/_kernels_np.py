"""Numpy implementations of the hot kernels.

This module is the behavioral reference: the compiled extension
(_kernels_c) must produce bit-identical outputs for every function here.
To keep float results reproducible across the two backends, bilinear
interpolation and median averaging are specified as float64 expressions
with a fixed association order, and cost arithmetic is integer only.
"""

from __future__ import annotations

import warnings

import numpy as np

# Cost assigned to a pixel/hypothesis with no valid measurement. Large enough
# to lose every comparison, small enough that 8-path aggregation cannot
# overflow int32.
COST_SENTINEL = 1 << 20

# Path directions in fixed order: first 4 are the horizontal/vertical paths,
# the remaining 4 the diagonals. Entries are (dy, dx).
SGM_DIRECTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1))

_POP16 = np.array([bin(i).count("1") for i in range(1 << 16)], dtype=np.int32)


def popcount32(x: np.ndarray) -> np.ndarray:
    """Number of set bits per element of a uint32 array."""
    x = np.asarray(x, dtype=np.uint32)
    return _POP16[x & np.uint32(0xFFFF)] + _POP16[x >> np.uint32(16)]


def census_transform(img: np.ndarray, valid, window: int):
    """Census descriptors of a grayscale image.

    Bit i of the descriptor is set iff the i-th window neighbor (row-major,
    center skipped) is strictly darker than the center. Descriptors are valid
    only where the window lies fully inside the image and, if a validity mask
    is given, covers only valid samples. Invalid descriptors are zeroed.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    h, w = img.shape
    r = window // 2
    codes = np.zeros((h, w), dtype=np.uint32)
    out_valid = np.zeros((h, w), dtype=np.uint8)
    if h < window or w < window:
        return codes, out_valid

    center = img[r:h - r, r:w - r]
    ok = np.ones(center.shape, dtype=bool)
    vb = None if valid is None else np.asarray(valid).astype(bool)
    bit = 0
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            nb = img[r + dy:h - r + dy, r + dx:w - r + dx]
            codes[r:h - r, r:w - r] |= (nb < center).astype(np.uint32) << np.uint32(bit)
            if vb is not None:
                ok &= vb[r + dy:h - r + dy, r + dx:w - r + dx]
            bit += 1
    if vb is not None:
        ok &= vb[r:h - r, r:w - r]
    out_valid[r:h - r, r:w - r] = ok
    codes[out_valid == 0] = 0
    return codes, out_valid


def warp_bilinear(img: np.ndarray, hmat: np.ndarray, out_shape):
    """Resample img through a pixel homography onto an output grid.

    Output pixel q takes the bilinear sample of img at H * q. Samples behind
    the mapping (non-positive denominator) or outside the source rectangle
    are invalid and set to 0.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    sh, sw = img.shape
    oh, ow = out_shape
    gx, gy = np.meshgrid(np.arange(ow, dtype=np.float64), np.arange(oh, dtype=np.float64))
    den = hmat[2, 0] * gx + hmat[2, 1] * gy + hmat[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        mx = (hmat[0, 0] * gx + hmat[0, 1] * gy + hmat[0, 2]) / den
        my = (hmat[1, 0] * gx + hmat[1, 1] * gy + hmat[1, 2]) / den
    valid = (den > 0) & (mx >= 0) & (mx <= sw - 1) & (my >= 0) & (my <= sh - 1)
    mx = np.where(valid, mx, 0.0)
    my = np.where(valid, my, 0.0)

    x0 = np.floor(mx)
    y0 = np.floor(my)
    ax = mx - x0
    ay = my - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)
    x1i = np.minimum(x0i + 1, sw - 1)
    y1i = np.minimum(y0i + 1, sh - 1)

    i00 = img[y0i, x0i]
    i01 = img[y0i, x1i]
    i10 = img[y1i, x0i]
    i11 = img[y1i, x1i]
    v0 = i00 * (1.0 - ax) + i01 * ax
    v1 = i10 * (1.0 - ax) + i11 * ax
    out = v0 * (1.0 - ay) + v1 * ay
    out[~valid] = 0.0
    return out, valid.astype(np.uint8)


def _normalize_costs(cost_sum, cnt, n_match):
    # round-half-up of n_match * sum / count, sentinel where nothing matched
    out = np.full(cost_sum.shape, COST_SENTINEL, dtype=np.int32)
    nz = cnt > 0
    out[nz] = (2 * n_match * cost_sum[nz] + cnt[nz]) // (2 * cnt[nz])
    return out


def sweep_full(ref_codes, ref_valid, match_grays, hmats, window: int):
    """Full cost volume: census-Hamming cost per pixel and plane.

    hmats has shape (n_match, n_planes, 3, 3) and maps reference pixels to
    matching-image pixels for each plane hypothesis. The per-plane cost is
    round(n_match * sum / valid_count) over the matching images where both
    the reference and the warped descriptors are valid, so partly occluded
    pixels stay comparable to fully observed ones.
    """
    h, w = ref_codes.shape
    n_planes = hmats.shape[1]
    cost_sum = np.zeros((h, w, n_planes), dtype=np.int32)
    cnt = np.zeros((h, w, n_planes), dtype=np.int32)
    rv = ref_valid > 0
    for g in range(n_planes):
        for m in range(hmats.shape[0]):
            warped, wvalid = warp_bilinear(match_grays[m], hmats[m, g], (h, w))
            codes, cvalid = census_transform(warped, wvalid, window)
            ok = rv & (cvalid > 0)
            d = popcount32(np.bitwise_xor(ref_codes, codes))
            cost_sum[:, :, g] += np.where(ok, d, 0)
            cnt[:, :, g] += ok
    return _normalize_costs(cost_sum, cnt, hmats.shape[0])


def sweep_local(ref_codes, ref_valid, match_grays, hmats, offsets, counts, window: int):
    """Cost volume restricted to a per-pixel plane window.

    Slot j of pixel p holds the cost of plane offsets[p] + j for
    j < counts[p]; remaining slots are zero. Costs equal the corresponding
    entries of the full volume exactly.
    """
    full = sweep_full(ref_codes, ref_valid, match_grays, hmats, window)
    n_planes = full.shape[2]
    k = int(counts.max())
    idx = offsets[:, :, None].astype(np.int64) + np.arange(k, dtype=np.int64)
    used = idx < (offsets + counts)[:, :, None]
    out = np.take_along_axis(full, np.minimum(idx, n_planes - 1), axis=2)
    out[~used] = 0
    return out


def sgm_scan(costs, offsets, counts, p1: int, p2: int, ndirs: int, shifts):
    """Semi-global path aggregation over a (possibly windowed) cost volume.

    For each direction r, L_r(p, d) = C(p, d) + min(L_r(q, d'), L_r(q, d'+-1)
    + p1, min_k L_r(q, k) + p2) - min_k L_r(q, k), where q = p - r and d' is
    d translated by the per-pixel window offsets plus the optional
    per-direction index shift at p. Candidates falling outside q's window are
    unavailable; at image borders L_r = C. Returns the sum over the first
    ndirs directions. Integer arithmetic throughout.
    """
    costs = np.ascontiguousarray(costs, dtype=np.int32)
    h, w, k = costs.shape
    agg = np.zeros_like(costs)
    slot = np.arange(k, dtype=np.int64)
    big = np.int32(1) << 30

    off64 = offsets.astype(np.int64)
    cnt64 = counts.astype(np.int64)
    used_mask = slot[None, None, :] < cnt64[:, :, None]
    masked_costs = np.where(used_mask, costs, 0).astype(np.int32)

    for d in range(ndirs):
        dy, dx = SGM_DIRECTIONS[d]
        sh = None if shifts is None else shifts[d].astype(np.int64)
        lbuf = np.zeros_like(costs)
        if dy == 0:
            _scan_horizontal(lbuf, masked_costs, off64, cnt64, p1, p2, dx, sh, slot, big)
        else:
            _scan_vertical(lbuf, masked_costs, off64, cnt64, p1, p2, dy, dx, sh, slot, big)
        agg += lbuf
    return agg


def _step(lprev, offp, cntp, costc, offc, cntc, shiftc, p1, p2, slot, big):
    """One frontier update: lprev rows are the predecessor pixels."""
    k = lprev.shape[1]
    masked_prev = np.where(slot[None, :] < cntp[:, None], lprev, big)
    m = masked_prev.min(axis=1)
    base = offc + (0 if shiftc is None else shiftc) - offp
    idx = slot[None, :] + base[:, None]

    g0 = np.take_along_axis(lprev, np.clip(idx, 0, k - 1), axis=1)
    t0 = np.where((idx >= 0) & (idx < cntp[:, None]), g0, big)
    g1 = np.take_along_axis(lprev, np.clip(idx - 1, 0, k - 1), axis=1)
    t1 = np.where((idx - 1 >= 0) & (idx - 1 < cntp[:, None]), g1 + p1, big)
    g2 = np.take_along_axis(lprev, np.clip(idx + 1, 0, k - 1), axis=1)
    t2 = np.where((idx + 1 >= 0) & (idx + 1 < cntp[:, None]), g2 + p1, big)
    t3 = (m + p2)[:, None]

    best = np.minimum(np.minimum(t0, t1), np.minimum(t2, t3))
    out = costc + best - m[:, None]
    return np.where(slot[None, :] < cntc[:, None], out, 0).astype(np.int32)


def _scan_horizontal(lbuf, costs, off, cnt, p1, p2, dx, sh, slot, big):
    h, w, k = costs.shape
    xs = range(w) if dx > 0 else range(w - 1, -1, -1)
    first = True
    for x in xs:
        if first:
            lbuf[:, x] = costs[:, x]
            first = False
            continue
        xp = x - dx
        shiftc = None if sh is None else sh[:, x]
        lbuf[:, x] = _step(
            lbuf[:, xp], off[:, xp], cnt[:, xp],
            costs[:, x], off[:, x], cnt[:, x], shiftc, p1, p2, slot, big,
        )


def _scan_vertical(lbuf, costs, off, cnt, p1, p2, dy, dx, sh, slot, big):
    h, w, k = costs.shape
    ys = range(h) if dy > 0 else range(h - 1, -1, -1)
    # column ranges with an in-image predecessor (x - dx within the row)
    if dx > 0:
        cur, prev = slice(1, w), slice(0, w - 1)
        border = [0]
    elif dx < 0:
        cur, prev = slice(0, w - 1), slice(1, w)
        border = [w - 1]
    else:
        cur, prev = slice(0, w), slice(0, w)
        border = []
    first = True
    for y in ys:
        if first:
            lbuf[y] = costs[y]
            first = False
            continue
        yp = y - dy
        shiftc = None if sh is None else sh[y, cur]
        lbuf[y, cur] = _step(
            lbuf[yp, prev], off[yp, prev], cnt[yp, prev],
            costs[y, cur], off[y, cur], cnt[y, cur], shiftc, p1, p2, slot, big,
        )
        for x in border:
            lbuf[y, x] = costs[y, x]


def median_filter_masked(values, valid, window: int, min_valid: int):
    """Masked median over a square window, borders clipped.

    Invalid inputs are ignored; outputs with fewer than min_valid valid
    samples in the window are invalid (value 0). Median of an even count is
    the mean of the two central order statistics, computed in float64.
    """
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    r = window // 2
    padded = np.full((h + 2 * r, w + 2 * r), np.nan)
    padded[r:h + r, r:w + r] = np.where(valid > 0, values, np.nan)
    win = np.lib.stride_tricks.sliding_window_view(padded, (window, window))
    flat = win.reshape(h, w, window * window)
    count = np.sum(~np.isnan(flat), axis=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(flat, axis=2)
    out_valid = (count >= min_valid).astype(np.uint8)
    out = np.where(out_valid > 0, med, 0.0)
    return out, out_valid
