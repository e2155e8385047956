# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels, bit-identical to the numpy fallback (_kernels_np).

Float expressions replicate the fallback's association order and the build
disables FP contraction, so double results match exactly; everything else is
integer arithmetic.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

COST_SENTINEL = 1 << 20
SGM_DIRECTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1))

cdef int _SENTINEL = 1 << 20
cdef int _BIG = 1 << 30


cdef inline int _popcount(unsigned int x) nogil:
    cdef int c = 0
    while x != 0:
        x &= x - 1
        c += 1
    return c


# ---------------------------------------------------------------------------
# census transform


cdef void _census_into(double[:, ::1] img, unsigned char[:, ::1] valid,
                       int window,
                       unsigned int[:, ::1] codes, unsigned char[:, ::1] ovalid) nogil:
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    cdef int r = window // 2
    cdef Py_ssize_t y, x
    cdef int dy, dx, bit, ok
    cdef double center
    cdef unsigned int code
    for y in range(h):
        for x in range(w):
            codes[y, x] = 0
            ovalid[y, x] = 0
    if h < window or w < window:
        return
    for y in range(r, h - r):
        for x in range(r, w - r):
            center = img[y, x]
            ok = 1
            code = 0
            bit = 0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if dy == 0 and dx == 0:
                        if valid[y, x] == 0:
                            ok = 0
                        continue
                    if img[y + dy, x + dx] < center:
                        code |= (<unsigned int>1) << bit
                    if valid[y + dy, x + dx] == 0:
                        ok = 0
                    bit += 1
            if ok != 0:
                codes[y, x] = code
                ovalid[y, x] = 1


def census_transform(img, valid, int window):
    """Census descriptors; see the numpy fallback for the full contract."""
    cdef cnp.ndarray im = np.ascontiguousarray(img, dtype=np.float64)
    cdef Py_ssize_t h = im.shape[0], w = im.shape[1]
    if valid is None:
        valid = np.ones((h, w), dtype=np.uint8)
    cdef cnp.ndarray va = np.ascontiguousarray(valid, dtype=np.uint8)
    codes = np.zeros((h, w), dtype=np.uint32)
    ovalid = np.zeros((h, w), dtype=np.uint8)
    cdef double[:, ::1] imv = im
    cdef unsigned char[:, ::1] vav = va
    cdef unsigned int[:, ::1] cv = codes
    cdef unsigned char[:, ::1] ov = ovalid
    with nogil:
        _census_into(imv, vav, window, cv, ov)
    return codes, ovalid


# ---------------------------------------------------------------------------
# homography warping


cdef void _warp_into(double[:, ::1] img, double* hm,
                     double[:, ::1] out, unsigned char[:, ::1] ovalid) nogil:
    cdef Py_ssize_t sh = img.shape[0], sw = img.shape[1]
    cdef Py_ssize_t oh = out.shape[0], ow = out.shape[1]
    cdef Py_ssize_t y, x
    cdef double gx, gy, den, mx, my, x0, y0, ax, ay, v0, v1
    cdef Py_ssize_t ix0, iy0, ix1, iy1
    for y in range(oh):
        gy = <double>y
        for x in range(ow):
            gx = <double>x
            den = hm[6] * gx + hm[7] * gy + hm[8]
            if den > 0.0:
                mx = (hm[0] * gx + hm[1] * gy + hm[2]) / den
                my = (hm[3] * gx + hm[4] * gy + hm[5]) / den
                if mx >= 0.0 and mx <= <double>(sw - 1) and my >= 0.0 and my <= <double>(sh - 1):
                    x0 = floor(mx)
                    y0 = floor(my)
                    ax = mx - x0
                    ay = my - y0
                    ix0 = <Py_ssize_t>x0
                    iy0 = <Py_ssize_t>y0
                    ix1 = ix0 + 1
                    if ix1 > sw - 1:
                        ix1 = sw - 1
                    iy1 = iy0 + 1
                    if iy1 > sh - 1:
                        iy1 = sh - 1
                    v0 = img[iy0, ix0] * (1.0 - ax) + img[iy0, ix1] * ax
                    v1 = img[iy1, ix0] * (1.0 - ax) + img[iy1, ix1] * ax
                    out[y, x] = v0 * (1.0 - ay) + v1 * ay
                    ovalid[y, x] = 1
                    continue
            out[y, x] = 0.0
            ovalid[y, x] = 0


def warp_bilinear(img, hmat, out_shape):
    """Bilinear resampling through a pixel homography (see numpy fallback)."""
    cdef cnp.ndarray im = np.ascontiguousarray(img, dtype=np.float64)
    cdef cnp.ndarray hm = np.ascontiguousarray(hmat, dtype=np.float64).reshape(9)
    cdef Py_ssize_t oh = out_shape[0], ow = out_shape[1]
    out = np.zeros((oh, ow), dtype=np.float64)
    ovalid = np.zeros((oh, ow), dtype=np.uint8)
    cdef double[:, ::1] imv = im
    cdef double[::1] hv = hm
    cdef double[:, ::1] outv = out
    cdef unsigned char[:, ::1] ov = ovalid
    with nogil:
        _warp_into(imv, &hv[0], outv, ov)
    return out, ovalid


# ---------------------------------------------------------------------------
# plane sweeps


def sweep_full(ref_codes, ref_valid, match_grays, hmats, int window):
    """Full cost volume over all planes (see numpy fallback)."""
    cdef cnp.ndarray rc = np.ascontiguousarray(ref_codes, dtype=np.uint32)
    cdef cnp.ndarray rv = np.ascontiguousarray(ref_valid, dtype=np.uint8)
    cdef cnp.ndarray hm = np.ascontiguousarray(hmats, dtype=np.float64)
    cdef Py_ssize_t h = rc.shape[0], w = rc.shape[1]
    cdef Py_ssize_t n_match = hm.shape[0], n_planes = hm.shape[1]

    grays = np.stack([np.ascontiguousarray(img, dtype=np.float64) for img in match_grays])
    cdef double[:, :, ::1] gv = grays

    cost_sum = np.zeros((h, w, n_planes), dtype=np.int32)
    cnt = np.zeros((h, w, n_planes), dtype=np.int32)
    warped = np.zeros((h, w), dtype=np.float64)
    wvalid = np.zeros((h, w), dtype=np.uint8)
    codes = np.zeros((h, w), dtype=np.uint32)
    cvalid = np.zeros((h, w), dtype=np.uint8)

    cdef int[:, :, ::1] sv = cost_sum
    cdef int[:, :, ::1] cv2 = cnt
    cdef double[:, ::1] wv = warped
    cdef unsigned char[:, ::1] wvv = wvalid
    cdef unsigned int[:, ::1] cdv = codes
    cdef unsigned char[:, ::1] cvv = cvalid
    cdef unsigned int[:, ::1] rcv = rc
    cdef unsigned char[:, ::1] rvv = rv
    cdef double[:, :, :, ::1] hv = hm

    cdef Py_ssize_t g, m, y, x
    with nogil:
        for g in range(n_planes):
            for m in range(n_match):
                _warp_into(gv[m], &hv[m, g, 0, 0], wv, wvv)
                _census_into(wv, wvv, window, cdv, cvv)
                for y in range(h):
                    for x in range(w):
                        if rvv[y, x] != 0 and cvv[y, x] != 0:
                            sv[y, x, g] += _popcount(rcv[y, x] ^ cdv[y, x])
                            cv2[y, x, g] += 1

    out = np.zeros((h, w, n_planes), dtype=np.int32)
    cdef int[:, :, ::1] ov = out
    cdef int nm = <int>n_match
    with nogil:
        for y in range(h):
            for x in range(w):
                for g in range(n_planes):
                    if cv2[y, x, g] > 0:
                        ov[y, x, g] = (2 * nm * sv[y, x, g] + cv2[y, x, g]) // (2 * cv2[y, x, g])
                    else:
                        ov[y, x, g] = _SENTINEL
    return out


cdef inline int _sample(double[:, ::1] img, Py_ssize_t sh, Py_ssize_t sw,
                        double* hm, double gx, double gy, double* val) nogil:
    cdef double den, mx, my, x0, y0, ax, ay, v0, v1
    cdef Py_ssize_t ix0, iy0, ix1, iy1
    den = hm[6] * gx + hm[7] * gy + hm[8]
    if den <= 0.0:
        return 0
    mx = (hm[0] * gx + hm[1] * gy + hm[2]) / den
    my = (hm[3] * gx + hm[4] * gy + hm[5]) / den
    if not (mx >= 0.0 and mx <= <double>(sw - 1) and my >= 0.0 and my <= <double>(sh - 1)):
        return 0
    x0 = floor(mx)
    y0 = floor(my)
    ax = mx - x0
    ay = my - y0
    ix0 = <Py_ssize_t>x0
    iy0 = <Py_ssize_t>y0
    ix1 = ix0 + 1
    if ix1 > sw - 1:
        ix1 = sw - 1
    iy1 = iy0 + 1
    if iy1 > sh - 1:
        iy1 = sh - 1
    v0 = img[iy0, ix0] * (1.0 - ax) + img[iy0, ix1] * ax
    v1 = img[iy1, ix0] * (1.0 - ax) + img[iy1, ix1] * ax
    val[0] = v0 * (1.0 - ay) + v1 * ay
    return 1


cdef inline int _point_code(double[:, ::1] img, Py_ssize_t sh, Py_ssize_t sw,
                            double* hm, Py_ssize_t px, Py_ssize_t py, int r,
                            unsigned int* code_out) nogil:
    # census descriptor of the warped image at pixel p, sampled on the fly
    cdef double center, val
    cdef unsigned int code = 0
    cdef int bit = 0
    cdef int dy, dx
    if _sample(img, sh, sw, hm, <double>px, <double>py, &center) == 0:
        return 0
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            if _sample(img, sh, sw, hm, <double>(px + dx), <double>(py + dy), &val) == 0:
                return 0
            if val < center:
                code |= (<unsigned int>1) << bit
            bit += 1
    code_out[0] = code
    return 1


def sweep_local(ref_codes, ref_valid, match_grays, hmats, offsets, counts, int window):
    """Windowed cost volume, evaluated per pixel hypothesis.

    Equals the matching slice of sweep_full exactly; hypotheses are sampled
    pointwise so only the per-pixel plane windows are computed.
    """
    cdef cnp.ndarray rc = np.ascontiguousarray(ref_codes, dtype=np.uint32)
    cdef cnp.ndarray rv = np.ascontiguousarray(ref_valid, dtype=np.uint8)
    cdef cnp.ndarray hm = np.ascontiguousarray(hmats, dtype=np.float64)
    cdef cnp.ndarray offs = np.ascontiguousarray(offsets, dtype=np.int32)
    cdef cnp.ndarray cnts = np.ascontiguousarray(counts, dtype=np.int32)
    cdef Py_ssize_t h = rc.shape[0], w = rc.shape[1]
    cdef Py_ssize_t n_match = hm.shape[0]
    cdef int kmax = int(np.max(cnts))

    grays = np.stack([np.ascontiguousarray(img, dtype=np.float64) for img in match_grays])
    cdef double[:, :, ::1] gv = grays

    out = np.zeros((h, w, kmax), dtype=np.int32)
    cdef int[:, :, ::1] ov = out
    cdef unsigned int[:, ::1] rcv = rc
    cdef unsigned char[:, ::1] rvv = rv
    cdef double[:, :, :, ::1] hv = hm
    cdef int[:, ::1] offv = offs
    cdef int[:, ::1] cntv = cnts

    cdef int r = window // 2
    cdef Py_ssize_t y, x, m
    cdef int j, cnt, off, g, s, c, interior
    cdef int nm = <int>n_match
    cdef unsigned int code
    with nogil:
        for y in range(h):
            for x in range(w):
                cnt = cntv[y, x]
                off = offv[y, x]
                interior = 1
                if y < r or y >= h - r or x < r or x >= w - r:
                    interior = 0
                if rvv[y, x] == 0 or interior == 0:
                    for j in range(cnt):
                        ov[y, x, j] = _SENTINEL
                    continue
                for j in range(cnt):
                    g = off + j
                    s = 0
                    c = 0
                    for m in range(n_match):
                        if _point_code(gv[m], h, w, &hv[m, g, 0, 0], x, y, r, &code) != 0:
                            s += _popcount(rcv[y, x] ^ code)
                            c += 1
                    if c > 0:
                        ov[y, x, j] = (2 * nm * s + c) // (2 * c)
                    else:
                        ov[y, x, j] = _SENTINEL
    return out


# ---------------------------------------------------------------------------
# semi-global aggregation


def sgm_scan(costs, offsets, counts, int p1, int p2, int ndirs, shifts):
    """Path aggregation; semantics documented on the numpy fallback."""
    cdef cnp.ndarray ca = np.ascontiguousarray(costs, dtype=np.int32)
    cdef cnp.ndarray offs = np.ascontiguousarray(offsets, dtype=np.int32)
    cdef cnp.ndarray cnts = np.ascontiguousarray(counts, dtype=np.int32)
    cdef Py_ssize_t h = ca.shape[0], w = ca.shape[1], k = ca.shape[2]

    cdef int has_shift = 0
    cdef cnp.ndarray sh_arr
    if shifts is not None:
        sh_arr = np.ascontiguousarray(shifts, dtype=np.int8)
        has_shift = 1
    else:
        sh_arr = np.zeros((1, 1, 1), dtype=np.int8)

    agg = np.zeros((h, w, k), dtype=np.int32)
    lbuf = np.zeros((h, w, k), dtype=np.int32)

    cdef int[:, :, ::1] cv = ca
    cdef int[:, ::1] offv = offs
    cdef int[:, ::1] cntv = cnts
    cdef signed char[:, :, ::1] shv = sh_arr
    cdef int[:, :, ::1] av = agg
    cdef int[:, :, ::1] lv = lbuf

    cdef int d, dy, dx
    cdef Py_ssize_t y, x, yp, xp
    cdef Py_ssize_t ys_start, ys_stop, ys_step, xs_start, xs_stop, xs_step
    cdef int j, jq, cnt, cntp, base, m, best, cand
    for d in range(ndirs):
        dy, dx = SGM_DIRECTIONS[d]
        if dy >= 0:
            ys_start, ys_stop, ys_step = 0, h, 1
        else:
            ys_start, ys_stop, ys_step = h - 1, -1, -1
        if dx >= 0:
            xs_start, xs_stop, xs_step = 0, w, 1
        else:
            xs_start, xs_stop, xs_step = w - 1, -1, -1
        with nogil:
            y = ys_start
            while y != ys_stop:
                x = xs_start
                while x != xs_stop:
                    cnt = cntv[y, x]
                    yp = y - dy
                    xp = x - dx
                    if yp < 0 or yp >= h or xp < 0 or xp >= w:
                        for j in range(cnt):
                            lv[y, x, j] = cv[y, x, j]
                        for j in range(cnt, k):
                            lv[y, x, j] = 0
                    else:
                        cntp = cntv[yp, xp]
                        m = _BIG
                        for j in range(cntp):
                            if lv[yp, xp, j] < m:
                                m = lv[yp, xp, j]
                        base = offv[y, x] - offv[yp, xp]
                        if has_shift != 0:
                            base += shv[d, y, x]
                        for j in range(cnt):
                            best = m + p2
                            jq = j + base
                            if 0 <= jq < cntp:
                                cand = lv[yp, xp, jq]
                                if cand < best:
                                    best = cand
                            if 0 <= jq - 1 < cntp:
                                cand = lv[yp, xp, jq - 1] + p1
                                if cand < best:
                                    best = cand
                            if 0 <= jq + 1 < cntp:
                                cand = lv[yp, xp, jq + 1] + p1
                                if cand < best:
                                    best = cand
                            lv[y, x, j] = cv[y, x, j] + best - m
                        for j in range(cnt, k):
                            lv[y, x, j] = 0
                    x += xs_step
                y += ys_step
            for y in range(h):
                for x in range(w):
                    for j in range(k):
                        av[y, x, j] += lv[y, x, j]
    return agg


# ---------------------------------------------------------------------------
# masked median


def median_filter_masked(values, valid, int window, int min_valid):
    """Masked median over a clipped square window (see numpy fallback)."""
    cdef cnp.ndarray va = np.ascontiguousarray(values, dtype=np.float64)
    cdef cnp.ndarray ma = np.ascontiguousarray(valid, dtype=np.uint8)
    cdef Py_ssize_t h = va.shape[0], w = va.shape[1]
    if window > 11:
        raise ValueError("median window too large")
    out = np.zeros((h, w), dtype=np.float64)
    ovalid = np.zeros((h, w), dtype=np.uint8)
    cdef double[:, ::1] vv = va
    cdef unsigned char[:, ::1] mv = ma
    cdef double[:, ::1] ov = out
    cdef unsigned char[:, ::1] olv = ovalid
    cdef int r = window // 2
    cdef Py_ssize_t y, x
    cdef Py_ssize_t yy, xx, y0, y1, x0, x1
    cdef int n, i, jj
    cdef double buf[121]
    cdef double v
    with nogil:
        for y in range(h):
            y0 = y - r
            if y0 < 0:
                y0 = 0
            y1 = y + r
            if y1 > h - 1:
                y1 = h - 1
            for x in range(w):
                x0 = x - r
                if x0 < 0:
                    x0 = 0
                x1 = x + r
                if x1 > w - 1:
                    x1 = w - 1
                n = 0
                for yy in range(y0, y1 + 1):
                    for xx in range(x0, x1 + 1):
                        if mv[yy, xx] != 0:
                            v = vv[yy, xx]
                            i = n
                            # insertion sort keeps buf ascending
                            while i > 0 and buf[i - 1] > v:
                                buf[i] = buf[i - 1]
                                i -= 1
                            buf[i] = v
                            n += 1
                if n >= min_valid:
                    if n % 2 == 1:
                        ov[y, x] = buf[n // 2]
                    else:
                        ov[y, x] = (buf[n // 2 - 1] + buf[n // 2]) / 2.0
                    olv[y, x] = 1
                else:
                    ov[y, x] = 0.0
                    olv[y, x] = 0
    return out, ovalid
