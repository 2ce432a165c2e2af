"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np

_CHUNK_ELEMS = 1 << 20


def fps(pts, count, seed):
    n = pts.shape[0]
    out = np.empty(count, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = seed
    for i in range(count):
        out[i] = cur
        mind[cur] = -1.0
        diff = pts - pts[cur]
        d = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        live = mind >= 0.0
        np.minimum(mind, d, out=mind, where=live)
        cur = int(np.argmax(mind))
    return out


def _sqdist(queries, pts):
    diff = pts[None, :, :] - queries[:, None, :]
    return diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]


def _select_k(d2, k):
    nq, n = d2.shape
    if k == n:
        cand = np.broadcast_to(np.arange(n), d2.shape)
    else:
        kth = np.partition(d2, k - 1, axis=1)[:, k - 1 : k]
        mask = d2 <= kth
        counts = mask.sum(axis=1)
        cand = np.empty((nq, k), dtype=np.int64)
        exact = counts == k
        if exact.any():
            cand[exact] = np.nonzero(mask[exact])[1].reshape(-1, k)
        for row in np.nonzero(~exact)[0]:
            # ties straddle the k-th slot: keep the lowest indices among equals
            cols = np.nonzero(mask[row])[0]
            cols = cols[np.lexsort((cols, d2[row, cols]))]
            cand[row] = cols[:k]
    cd = np.take_along_axis(d2, cand, axis=1)
    order = np.lexsort((cand, cd), axis=1)
    return np.take_along_axis(cand, order, axis=1), np.take_along_axis(cd, order, axis=1)


def grid_knn(pts, order, cell_start, origin, h, dims, queries, k):
    # brute force; the grid arguments are accepted for signature parity only
    nq, n = queries.shape[0], pts.shape[0]
    idx = np.empty((nq, k), dtype=np.int64)
    d2 = np.empty((nq, k), dtype=np.float64)
    step = max(1, _CHUNK_ELEMS // max(n, 1))
    for s in range(0, nq, step):
        block = _sqdist(queries[s : s + step], pts)
        idx[s : s + step], d2[s : s + step] = _select_k(block, k)
    return idx, d2


def _bilinear_setup(uv, res):
    top = res - 1.0
    u = np.clip((uv[:, 0] + 0.5) * res - 0.5, 0.0, top)
    v = np.clip((uv[:, 1] + 0.5) * res - 0.5, 0.0, top)
    i0 = np.minimum(np.floor(u).astype(np.int64), res - 2)
    j0 = np.minimum(np.floor(v).astype(np.int64), res - 2)
    return i0, j0, u - i0, v - j0


def splat_plane(uv, values, res):
    nc = values.shape[1]
    i0, j0, fu, fv = _bilinear_setup(uv, res)
    sums = np.zeros((res * res, nc))
    wts = np.zeros(res * res)
    for di in (0, 1):
        for dj in (0, 1):
            w = (fu if di else 1.0 - fu) * (fv if dj else 1.0 - fv)
            cell = (i0 + di) * res + (j0 + dj)
            wts += np.bincount(cell, weights=w, minlength=res * res)
            for ch in range(nc):
                sums[:, ch] += np.bincount(cell, weights=w * values[:, ch], minlength=res * res)
    return sums.reshape(res, res, nc), wts.reshape(res, res)


def sample_plane(plane, uv):
    res = plane.shape[0]
    i0, j0, fu, fv = _bilinear_setup(uv, res)
    fu = fu[:, None]
    fv = fv[:, None]
    return ((1.0 - fu) * (1.0 - fv) * plane[i0, j0]
            + (1.0 - fu) * fv * plane[i0, j0 + 1]
            + fu * (1.0 - fv) * plane[i0 + 1, j0]
            + fu * fv * plane[i0 + 1, j0 + 1])
