"""Dense warp of the source cloud by blending node rigid motions."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .core import DeformationGraph, InvalidArgument, RegistrationResult, SpatialGrid, as_cloud
from .transform import EPS_INIT

K_INIT = 6
K_SKIN = 4
MIN_WEIGHT_SUM = 1e-12


@dataclass(frozen=True)
class SkinBinding:
    """Nodes driving one source point, nearest first, and their RBF weights."""

    point: int
    nodes: tuple
    weights: tuple


def rbf_weight(x, node_rest, radius):
    """Gaussian falloff ``exp(-d^2 / (2 r^2))`` of a node's influence."""
    radius = np.asarray(radius, dtype=np.float64)
    if np.any(radius <= 0):
        raise InvalidArgument("radius must be positive")
    d2 = np.sum((np.asarray(x, dtype=np.float64) - np.asarray(node_rest, dtype=np.float64)) ** 2, axis=-1)
    return np.exp(-d2 / (2.0 * radius**2))


def bind(points, graph: DeformationGraph, k_init=K_INIT, k_skin=K_SKIN, eps=EPS_INIT):
    """Bindings for many points at once.

    Returns ``(nodes, weights, mask)`` each ``(N, k_skin)``; ``mask`` marks the
    live slots (survivors of the rigidity filter, nearest first), dead slots
    carry weight 0.
    """
    pts = as_cloud(points)
    if k_init < 1:
        raise InvalidArgument("k_init must be positive")
    B = graph.num_nodes
    k_init = min(k_init, B)
    k_skin = min(k_skin, k_init)
    cand, d2 = SpatialGrid(graph.rest_nodes).query(pts, k_init)
    anchor = cand[:, 0]
    rest = graph.rest_nodes
    traj = graph.node_traj
    # deviation relative to the anchor node, worst over all frames, fixed threshold
    rest_d = np.linalg.norm(rest[cand] - rest[anchor][:, None, :], axis=-1)
    cur_d = np.linalg.norm(traj[:, cand] - traj[:, anchor][:, :, None, :], axis=-1)
    safe = np.where(rest_d > 0.0, rest_d, 1.0)
    dev = np.where(rest_d > 0.0, np.abs(cur_d / safe - 1.0).max(axis=0), 0.0)
    keep = dev < eps
    keep[:, 0] = True
    # stable compaction of survivors, nearest first, capped at k_skin
    order = np.argsort(~keep, axis=1, kind="stable")[:, :k_skin]
    nodes = np.take_along_axis(cand, order, axis=1)
    mask = np.take_along_axis(keep, order, axis=1)
    node_d2 = np.take_along_axis(d2, order, axis=1)
    weights = np.where(mask, np.exp(-node_d2 / (2.0 * graph.radii[nodes] ** 2)), 0.0)
    return nodes, weights, mask


def assign_nodes(x, graph: DeformationGraph, k_init=K_INIT, k_skin=K_SKIN, index=-1) -> SkinBinding:
    nodes, weights, mask = bind(np.asarray(x, dtype=np.float64).reshape(1, 3), graph, k_init, k_skin)
    m = mask[0]
    return SkinBinding(index, tuple(int(n) for n in nodes[0][m]), tuple(float(w) for w in weights[0][m]))


def _blend(points, nodes, weights, rotations, translations):
    moved = np.einsum("nkij,nj->nki", rotations[nodes], points) + translations[nodes]
    wsum = weights.sum(axis=1)
    low = wsum < MIN_WEIGHT_SUM
    safe = np.where(low, 1.0, wsum)
    out = np.einsum("nk,nki->ni", weights, moved) / safe[:, None]
    if low.any():
        out[low] = moved[low, 0]
    return out


def warp_points(points, nodes, weights, graph: DeformationGraph, frame):
    """LBS warp of ``points`` with precomputed bindings for one frame."""
    if graph.rotations is None:
        raise InvalidArgument("graph transforms have not been estimated")
    return _blend(np.asarray(points, dtype=np.float64), nodes, weights,
                  graph.rotations[frame], graph.translations[frame])


def warp_point(x, binding: SkinBinding, graph: DeformationGraph, frame):
    if not binding.nodes:
        raise InvalidArgument("empty binding")
    nodes = np.array([binding.nodes], dtype=np.int64)
    weights = np.array([binding.weights], dtype=np.float64)
    return warp_points(np.asarray(x, dtype=np.float64).reshape(1, 3), nodes, weights, graph, frame)[0]


def register(source, graph: DeformationGraph, k_init=K_INIT, k_skin=K_SKIN):
    """Warp every source point into every frame; bindings are computed once."""
    src = as_cloud(source, "source")
    t0 = time.perf_counter()
    nodes, weights, _ = bind(src, graph, k_init, k_skin)
    bind_time = time.perf_counter() - t0
    T = graph.num_frames
    warped = np.empty((T, src.shape[0], 3))
    seconds = np.empty(T)
    for i in range(T):
        t0 = time.perf_counter()
        warped[i] = warp_points(src, nodes, weights, graph, i)
        seconds[i] = time.perf_counter() - t0 + bind_time / T
    return RegistrationResult(warped, seconds, graph)
