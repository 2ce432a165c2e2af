# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: farthest point sampling, grid kNN, triplane splat/sample.

Every function here has a numpy twin in ``_kernels_py`` with the same
signature and the same results (bitwise for index outputs).
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def fps(const double[:, ::1] pts, Py_ssize_t count, Py_ssize_t seed):
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t i, j, best
    cdef double dx, dy, dz, d, bestd
    out_arr = np.empty(count, dtype=np.int64)
    mind_arr = np.full(n, np.inf, dtype=np.float64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef double[::1] mind = mind_arr
    cdef Py_ssize_t cur = seed
    with nogil:
        for i in range(count):
            out[i] = cur
            mind[cur] = -1.0
            best = -1
            bestd = -2.0
            for j in range(n):
                if mind[j] < 0.0:
                    continue
                dx = pts[j, 0] - pts[cur, 0]
                dy = pts[j, 1] - pts[cur, 1]
                dz = pts[j, 2] - pts[cur, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < mind[j]:
                    mind[j] = d
                if mind[j] > bestd:
                    bestd = mind[j]
                    best = j
            cur = best
    return out_arr


cdef inline void _insert(double d, cnp.int64_t idx, double[::1] hd,
                         cnp.int64_t[::1] hi, Py_ssize_t *filled, Py_ssize_t k) noexcept nogil:
    # sorted insertion keyed on (distance, index)
    cdef Py_ssize_t pos
    if filled[0] == k:
        if d > hd[k - 1] or (d == hd[k - 1] and idx > hi[k - 1]):
            return
        pos = k - 1
    else:
        pos = filled[0]
        filled[0] += 1
    while pos > 0 and (hd[pos - 1] > d or (hd[pos - 1] == d and hi[pos - 1] > idx)):
        hd[pos] = hd[pos - 1]
        hi[pos] = hi[pos - 1]
        pos -= 1
    hd[pos] = d
    hi[pos] = idx


def grid_knn(const double[:, ::1] pts, const cnp.int64_t[::1] order,
             const cnp.int64_t[::1] cell_start, const double[::1] origin,
             double h, const cnp.int64_t[::1] dims,
             const double[:, ::1] queries, Py_ssize_t k):
    cdef Py_ssize_t nq = queries.shape[0]
    cdef Py_ssize_t q, r, a, b, c, s, e, m, filled, rmax
    cdef Py_ssize_t ci, cj, ck, nx = dims[0], ny = dims[1], nz = dims[2]
    cdef Py_ssize_t lo_a, hi_a, lo_b, hi_b, lo_c, hi_c
    cdef cnp.int64_t p
    cdef double dx, dy, dz, d, bound
    idx_arr = np.empty((nq, k), dtype=np.int64)
    d2_arr = np.empty((nq, k), dtype=np.float64)
    cdef cnp.int64_t[:, ::1] idx = idx_arr
    cdef double[:, ::1] d2 = d2_arr
    rmax = nx
    if ny > rmax:
        rmax = ny
    if nz > rmax:
        rmax = nz
    with nogil:
        for q in range(nq):
            ci = <Py_ssize_t>floor((queries[q, 0] - origin[0]) / h)
            cj = <Py_ssize_t>floor((queries[q, 1] - origin[1]) / h)
            ck = <Py_ssize_t>floor((queries[q, 2] - origin[2]) / h)
            ci = 0 if ci < 0 else (nx - 1 if ci >= nx else ci)
            cj = 0 if cj < 0 else (ny - 1 if cj >= ny else cj)
            ck = 0 if ck < 0 else (nz - 1 if ck >= nz else ck)
            filled = 0
            r = 0
            while True:
                lo_a = ci - r if ci - r > 0 else 0
                hi_a = ci + r if ci + r < nx - 1 else nx - 1
                lo_b = cj - r if cj - r > 0 else 0
                hi_b = cj + r if cj + r < ny - 1 else ny - 1
                lo_c = ck - r if ck - r > 0 else 0
                hi_c = ck + r if ck + r < nz - 1 else nz - 1
                for a in range(lo_a, hi_a + 1):
                    for b in range(lo_b, hi_b + 1):
                        for c in range(lo_c, hi_c + 1):
                            # only the shell at Chebyshev distance r
                            if (a - ci != r and ci - a != r and b - cj != r and cj - b != r
                                    and c - ck != r and ck - c != r):
                                continue
                            m = (a * ny + b) * nz + c
                            s = cell_start[m]
                            e = cell_start[m + 1]
                            for m in range(s, e):
                                p = order[m]
                                dx = pts[p, 0] - queries[q, 0]
                                dy = pts[p, 1] - queries[q, 1]
                                dz = pts[p, 2] - queries[q, 2]
                                d = dx * dx + dy * dy + dz * dz
                                _insert(d, p, d2[q], idx[q], &filled, k)
                if r >= rmax:
                    break
                bound = r * h
                if filled == k and d2[q, k - 1] < bound * bound:
                    break
                r += 1
    return idx_arr, d2_arr


def splat_plane(const double[:, ::1] uv, const double[:, ::1] values, Py_ssize_t res):
    """Bilinear splat of per-point values onto one R x R plane (sums and weights)."""
    cdef Py_ssize_t n = uv.shape[0], nc = values.shape[1]
    cdef Py_ssize_t i, ch, i0, j0, di, dj, ii, jj
    cdef double u, v, fu, fv, w
    sums_arr = np.zeros((res, res, nc), dtype=np.float64)
    wts_arr = np.zeros((res, res), dtype=np.float64)
    cdef double[:, :, ::1] sums = sums_arr
    cdef double[:, ::1] wts = wts_arr
    cdef double top = res - 1
    with nogil:
        for i in range(n):
            u = (uv[i, 0] + 0.5) * res - 0.5
            v = (uv[i, 1] + 0.5) * res - 0.5
            u = 0.0 if u < 0.0 else (top if u > top else u)
            v = 0.0 if v < 0.0 else (top if v > top else v)
            i0 = <Py_ssize_t>floor(u)
            j0 = <Py_ssize_t>floor(v)
            if i0 > res - 2:
                i0 = res - 2
            if j0 > res - 2:
                j0 = res - 2
            fu = u - i0
            fv = v - j0
            for di in range(2):
                for dj in range(2):
                    w = (fu if di else 1.0 - fu) * (fv if dj else 1.0 - fv)
                    if w == 0.0:
                        continue
                    ii = i0 + di
                    jj = j0 + dj
                    wts[ii, jj] += w
                    for ch in range(nc):
                        sums[ii, jj, ch] += w * values[i, ch]
    return sums_arr, wts_arr


def sample_plane(const double[:, :, ::1] plane, const double[:, ::1] uv):
    cdef Py_ssize_t n = uv.shape[0], res = plane.shape[0], nc = plane.shape[2]
    cdef Py_ssize_t i, ch, i0, j0
    cdef double u, v, fu, fv, top = res - 1
    out_arr = np.empty((n, nc), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            u = (uv[i, 0] + 0.5) * res - 0.5
            v = (uv[i, 1] + 0.5) * res - 0.5
            u = 0.0 if u < 0.0 else (top if u > top else u)
            v = 0.0 if v < 0.0 else (top if v > top else v)
            i0 = <Py_ssize_t>floor(u)
            j0 = <Py_ssize_t>floor(v)
            if i0 > res - 2:
                i0 = res - 2
            if j0 > res - 2:
                j0 = res - 2
            fu = u - i0
            fv = v - j0
            for ch in range(nc):
                out[i, ch] = ((1.0 - fu) * (1.0 - fv) * plane[i0, j0, ch]
                              + (1.0 - fu) * fv * plane[i0, j0 + 1, ch]
                              + fu * (1.0 - fv) * plane[i0 + 1, j0, ch]
                              + fu * fv * plane[i0 + 1, j0 + 1, ch])
    return out_arr
