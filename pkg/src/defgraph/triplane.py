"""Hand-crafted point descriptors splatted onto three orthogonal feature planes.

Planes are ordered ``(xy, yz, xz)`` and cover the scene cube ``[-0.5, 0.5]^3``.
Cell ``i`` of an ``R``-cell axis is centred at ``-0.5 + (i + 0.5) / R``;
lookups outside the cube clamp to the border cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .core import InvalidArgument, as_cloud

NUM_CHANNELS = 8
PLANE_AXES = ((0, 1), (1, 2), (0, 2))
DEFAULT_RADII = (0.04, 0.08)
MAX_FILL_PASSES = 2


def _orient(normals):
    # sign convention: +z hemisphere, then +y, then +x for vectors in the xy plane
    n = normals.copy()
    key = np.where(n[:, 2] != 0.0, n[:, 2], np.where(n[:, 1] != 0.0, n[:, 1], n[:, 0]))
    n[key < 0.0] *= -1.0
    return n


def compute_descriptors(cloud, radius_small=DEFAULT_RADII[0], radius_large=DEFAULT_RADII[1]):
    """Per-point ``(N, 8)`` descriptors.

    Channels: density at ``radius_small`` and ``radius_large`` (neighbour count
    over the count expected if all ``N`` points filled the unit cube
    uniformly), unit normal (3), height of the point above its local centroid
    along the normal, distance to the local centroid, occupancy.
    """
    pts = as_cloud(cloud)
    if not (0.0 < radius_small < radius_large):
        raise InvalidArgument("radii must satisfy 0 < radius_small < radius_large")
    n = pts.shape[0]
    tree = cKDTree(pts)
    out = np.zeros((n, NUM_CHANNELS))
    for ch, r in enumerate((radius_small, radius_large)):
        counts = tree.query_ball_point(pts, r, return_length=True) - 1
        out[:, ch] = counts / (n * 4.0 / 3.0 * np.pi * r**3)

    nbrs = tree.query_ball_point(pts, radius_large)
    sizes = np.fromiter((len(x) for x in nbrs), dtype=np.int64, count=n)
    flat = np.fromiter((j for x in nbrs for j in x), dtype=np.int64, count=int(sizes.sum()))
    owner = np.repeat(np.arange(n), sizes)
    centroid = np.stack([np.bincount(owner, pts[flat, a], minlength=n) for a in range(3)], 1)
    centroid /= sizes[:, None]
    rel = pts[flat] - centroid[owner]
    cov = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            cov[:, a, b] = cov[:, b, a] = np.bincount(owner, rel[:, a] * rel[:, b], minlength=n)
    _, vecs = np.linalg.eigh(cov)
    normals = _orient(vecs[:, :, 0])
    sparse = sizes < 3
    normals[sparse] = (0.0, 0.0, 1.0)
    offset = pts - centroid
    offset[sparse] = 0.0
    out[:, 2:5] = normals
    out[:, 5] = np.einsum("ij,ij->i", offset, normals)
    out[:, 6] = np.linalg.norm(offset, axis=1)
    out[:, 7] = 1.0
    return out


@dataclass
class TriplaneGrid:
    """Three ``R x R x C`` feature planes plus per-cell splat mass.

    ``values[k]`` is plane ``k`` in ``(xy, yz, xz)`` order; ``weights[k]`` holds
    the summed bilinear splat weights (zero for empty or gap-filled cells).
    """

    values: np.ndarray
    weights: np.ndarray

    @property
    def resolution(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[3]

    @classmethod
    def empty(cls, resolution, channels=NUM_CHANNELS):
        return cls(np.zeros((3, resolution, resolution, channels)), np.zeros((3, resolution, resolution)))


def _fill_gaps(values, occupied, passes):
    res = values.shape[0]
    for _ in range(passes):
        vsum = np.zeros_like(values)
        cnt = np.zeros(occupied.shape)
        pv = np.pad(values * occupied[..., None], ((1, 1), (1, 1), (0, 0)))
        po = np.pad(occupied.astype(np.float64), 1)
        for di in range(3):
            for dj in range(3):
                vsum += pv[di : di + res, dj : dj + res]
                cnt += po[di : di + res, dj : dj + res]
        grow = ~occupied & (cnt > 0)
        if not grow.any():
            break
        values[grow] = vsum[grow] / cnt[grow][:, None]
        occupied = occupied | grow
    return values


def splat(cloud, descriptors, resolution=256, fill_passes=1):
    """Average per-point descriptors into the three planes with bilinear weights.

    Empty cells next to occupied ones are filled with the mean of their occupied
    3x3 neighbours, ``fill_passes`` times (at most 2); occupied cells are never
    overwritten.
    """
    pts = as_cloud(cloud)
    desc = np.ascontiguousarray(descriptors, dtype=np.float64)
    if desc.ndim != 2 or desc.shape[0] != pts.shape[0]:
        raise InvalidArgument("need one descriptor row per point")
    resolution = int(resolution)
    if resolution < 2:
        raise InvalidArgument(f"resolution must be >= 2, got {resolution}")
    if not 0 <= fill_passes <= MAX_FILL_PASSES:
        raise InvalidArgument(f"fill_passes must be in [0, {MAX_FILL_PASSES}]")
    values = np.zeros((3, resolution, resolution, desc.shape[1]))
    weights = np.zeros((3, resolution, resolution))
    for k, (a, b) in enumerate(PLANE_AXES):
        uv = np.ascontiguousarray(pts[:, (a, b)])
        sums, wts = kernels.splat_plane(uv, desc, resolution)
        occ = wts > 0.0
        plane = np.zeros_like(sums)
        plane[occ] = sums[occ] / wts[occ][:, None]
        values[k] = _fill_gaps(plane, occ, fill_passes)
        weights[k] = wts
    return TriplaneGrid(values, weights)


def sample_points(grid: TriplaneGrid, points):
    """Bilinear lookups for many points: ``(Q, 3C)`` in ``(xy, yz, xz)`` order."""
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    parts = [kernels.sample_plane(grid.values[k], np.ascontiguousarray(pts[:, (a, b)]))
             for k, (a, b) in enumerate(PLANE_AXES)]
    return np.concatenate(parts, axis=1)


def sample(grid: TriplaneGrid, p):
    return sample_points(grid, np.asarray(p, dtype=np.float64).reshape(1, 3))[0]


def default_offsets(resolution):
    step = 2.0 / resolution
    offs = [np.zeros(3)]
    for a in range(3):
        for s in (1.0, -1.0):
            o = np.zeros(3)
            o[a] = s * step
            offs.append(o)
    return np.array(offs)


def cosine_rows(a, b):
    """Row-wise cosine similarity with zero-norm rows mapped to 0."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    dot = np.sum(a * b, axis=-1)
    denom = na * nb
    return np.where(denom > 0.0, dot / np.where(denom > 0.0, denom, 1.0), 0.0)


def tile_descriptor(d, channels):
    d = np.asarray(d, dtype=np.float64)
    return np.tile(d, 3) if d.shape[-1] == channels else d


def correlation(grid: TriplaneGrid, p, d, offsets=None):
    """Cosine similarity between descriptor ``d`` and the grid sampled at ``p + o``."""
    if offsets is None:
        offsets = default_offsets(grid.resolution)
    offsets = np.atleast_2d(np.asarray(offsets, dtype=np.float64))
    if offsets.shape[0] == 0:
        raise InvalidArgument("offsets must be non-empty")
    feats = sample_points(grid, np.asarray(p, dtype=np.float64) + offsets)
    return cosine_rows(feats, tile_descriptor(d, grid.channels)[None, :])


def encode(cloud, resolution=256, radii=DEFAULT_RADII, fill_passes=1):
    """Descriptors and triplane grid for one cloud."""
    desc = compute_descriptors(cloud, *radii)
    return desc, splat(cloud, desc, resolution, fill_passes)
