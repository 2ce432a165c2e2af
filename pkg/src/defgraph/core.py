"""Domain types and geometric primitives shared by every stage.

Point clouds are plain ``(N, 3)`` float64 arrays; a sequence is a list of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

ORTHO_TOL = 1e-9


class DefGraphError(Exception):
    """Base class for all library errors."""


class InvalidArgument(DefGraphError, ValueError):
    pass


class DegenerateGeometry(DefGraphError):
    """Raised when a configuration admits no unique solution (e.g. colinear points)."""


class NumericalFailure(DefGraphError):
    pass


def as_cloud(points, name="cloud"):
    """Validate and return ``points`` as a contiguous ``(N, 3)`` float64 array."""
    arr = np.ascontiguousarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidArgument(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise InvalidArgument(f"{name} is empty")
    if not np.isfinite(arr).all():
        raise InvalidArgument(f"{name} contains non-finite coordinates")
    return arr


def as_sequence(frames):
    seq = [as_cloud(f, name=f"frame {i}") for i, f in enumerate(frames)]
    if not seq:
        raise InvalidArgument("sequence has no frames")
    return seq


# -- rotations ---------------------------------------------------------------

def axis_angle_matrix(axis, angle):
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        return np.eye(3)
    x, y, z = axis / norm
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def rotvec_matrix(w):
    """Batched exponential map: rotation vectors ``(..., 3)`` to matrices ``(..., 3, 3)``."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    K = np.zeros(w.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -w[..., 2], w[..., 1]
    K[..., 1, 0], K[..., 1, 2] = w[..., 2], -w[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -w[..., 1], w[..., 0]
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * (K @ K)


def geodesic_distance(Ra, Rb):
    """Rotation angle of ``Ra^T Rb`` in radians (batched over leading axes)."""
    rel = np.swapaxes(Ra, -1, -2) @ Rb
    c = (np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(c, -1.0, 1.0))


def is_rotation(R, tol=ORTHO_TOL):
    R = np.asarray(R)
    return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) <= tol)


@dataclass(frozen=True)
class Se3:
    """Rigid motion ``p -> rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3) or not is_rotation(R):
            raise InvalidArgument("rotation must be a proper 3x3 rotation matrix")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, p):
        return np.asarray(p, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: Se3) -> Se3:
        """``self ∘ other``: apply ``other`` first."""
        return Se3(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> Se3:
        return Se3(self.rotation.T, -self.rotation.T @ self.translation)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def se3_apply(t: Se3, p):
    return t.apply(p)


# -- normalization -----------------------------------------------------------

@dataclass(frozen=True)
class Normalization:
    """Similarity taking world coordinates to the unit-cube scene frame."""

    center: np.ndarray
    scale: float

    @classmethod
    def from_points(cls, points):
        pts = as_cloud(points)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        extent = float((hi - lo).max())
        return cls((lo + hi) / 2.0, extent if extent > 0.0 else 1.0)

    def forward(self, points):
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale

    def inverse(self, points):
        return np.asarray(points, dtype=np.float64) * self.scale + self.center


# -- sampling and neighbours -------------------------------------------------

def farthest_point_sample(cloud, count, seed_index=0):
    """Indices of ``count`` points chosen by farthest point sampling.

    Ties on the max-min distance go to the lowest index, so the result is
    deterministic for a given ``seed_index``.
    """
    pts = as_cloud(cloud)
    n = pts.shape[0]
    count = int(count)
    if count < 1 or count > n:
        raise InvalidArgument(f"count must be in [1, {n}], got {count}")
    if not 0 <= seed_index < n:
        raise InvalidArgument(f"seed_index {seed_index} out of range for {n} points")
    return kernels.fps(pts, count, int(seed_index))


class SpatialGrid:
    """Uniform-grid spatial hash for exact k-nearest-neighbour queries.

    Cell size is the largest bounding-box extent divided by ``cells``; the grid
    only prunes the search, results equal a linear scan with ties broken by
    lower index.
    """

    def __init__(self, points, cells=32):
        self.points = as_cloud(points)
        lo, hi = self.points.min(axis=0), self.points.max(axis=0)
        extent = float((hi - lo).max())
        # slight inflation keeps every point strictly inside the last cell
        self.h = extent / cells * (1.0 + 1e-9) if extent > 0.0 else 1.0
        self.origin = lo
        self.dims = np.maximum(np.ceil((hi - lo) / self.h).astype(np.int64), 1)
        self.dims = np.minimum(self.dims, cells).astype(np.int64)
        cell = np.floor((self.points - lo) / self.h).astype(np.int64)
        cell = np.minimum(np.maximum(cell, 0), self.dims - 1)
        flat = (cell[:, 0] * self.dims[1] + cell[:, 1]) * self.dims[2] + cell[:, 2]
        self.order = np.argsort(flat, kind="stable").astype(np.int64)
        counts = np.bincount(flat, minlength=int(np.prod(self.dims)))
        self.cell_start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def __len__(self):
        return self.points.shape[0]

    def query(self, queries, k):
        """Return ``(indices, squared_distances)``, each ``(Q, k)``, nearest first."""
        q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
        k = int(k)
        if k < 1 or k > len(self):
            raise InvalidArgument(f"k must be in [1, {len(self)}], got {k}")
        return kernels.grid_knn(self.points, self.order, self.cell_start, self.origin,
                                self.h, self.dims, q, k)


def knn(query, cloud, k):
    """Indices of the ``k`` points of ``cloud`` nearest ``query``, ascending."""
    idx, _ = SpatialGrid(cloud).query(np.asarray(query, dtype=np.float64).reshape(1, 3), k)
    return idx[0]


def neighbor_graph(nodes, k=4):
    """``(B, k')`` indices of each node's nearest other nodes, ``k' = min(k, B-1)``."""
    nodes = as_cloud(nodes, "nodes")
    kk = min(k, nodes.shape[0] - 1)
    if kk < 1:
        return np.zeros((nodes.shape[0], 0), dtype=np.int64)
    idx, _ = SpatialGrid(nodes).query(nodes, kk + 1)
    out = np.empty((nodes.shape[0], kk), dtype=np.int64)
    for p in range(nodes.shape[0]):
        row = idx[p][idx[p] != p]
        out[p] = row[:kk]
    return out


# -- graph and result containers ---------------------------------------------

@dataclass
class DeformationGraph:
    """Sparse nodes with radii, per-frame positions and per-frame rigid motions.

    ``rotations`` is ``(T, B, 3, 3)`` and ``translations`` ``(T, B, 3)``; both
    stay ``None`` until transforms are estimated.
    """

    rest_nodes: np.ndarray
    radii: np.ndarray
    node_traj: np.ndarray
    node_index: np.ndarray | None = None
    rotations: np.ndarray | None = None
    translations: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rest_nodes = as_cloud(self.rest_nodes, "rest_nodes")
        self.node_traj = np.asarray(self.node_traj, dtype=np.float64)
        self.radii = np.asarray(self.radii, dtype=np.float64)
        B = self.rest_nodes.shape[0]
        if B < 4:
            raise InvalidArgument(f"a deformation graph needs at least 4 nodes, got {B}")
        if self.node_traj.ndim != 3 or self.node_traj.shape[1:] != (B, 3):
            raise InvalidArgument(f"node_traj must be (T, {B}, 3), got {self.node_traj.shape}")
        if not np.isfinite(self.node_traj).all():
            raise InvalidArgument("node_traj contains non-finite values")
        if self.radii.shape != (B,) or not (self.radii > 0).all():
            raise InvalidArgument("radii must be B strictly positive values")

    @property
    def num_nodes(self):
        return self.rest_nodes.shape[0]

    @property
    def num_frames(self):
        return self.node_traj.shape[0]

    def transform(self, frame, node) -> Se3:
        if self.rotations is None:
            raise InvalidArgument("transforms have not been estimated")
        return Se3(self.rotations[frame, node], self.translations[frame, node])


@dataclass
class RegistrationResult:
    warped: np.ndarray
    per_frame_seconds: np.ndarray
    graph: DeformationGraph | None = None
    diagnostics: dict = field(default_factory=dict)
