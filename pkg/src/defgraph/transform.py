"""Per-node rigid motions from node trajectories.

Each node gathers nearby nodes whose distance to it stays nearly constant over
the whole sequence, then a weighted Kabsch fit maps the group's rest positions
onto its positions in every frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (DeformationGraph, DegenerateGeometry, InvalidArgument, Se3,
                   SpatialGrid, as_cloud)

EPS_INIT = 0.2
EPS_STEP = 0.1
MIN_GROUP = 4
DEFAULT_K = 8
DEGENERATE_SV = 1e-12


@dataclass(frozen=True)
class RigidGroup:
    center_node: int
    members: tuple
    epsilon_used: float


def distance_deviation(anchor_rest, cand_rest, anchor_traj, cand_traj):
    """Worst relative change, over frames, of each candidate's distance to the anchor.

    ``anchor_rest`` is ``(3,)``, ``cand_rest`` ``(K, 3)``, ``anchor_traj``
    ``(T, 3)`` and ``cand_traj`` ``(T, K, 3)``. A candidate sitting on the
    anchor at rest gets deviation 0.
    """
    rest_d = np.linalg.norm(cand_rest - anchor_rest, axis=-1)
    cur_d = np.linalg.norm(cand_traj - anchor_traj[:, None, :], axis=-1)
    safe = np.where(rest_d > 0.0, rest_d, 1.0)
    dev = np.abs(cur_d / safe - 1.0).max(axis=0)
    return np.where(rest_d > 0.0, dev, 0.0)


def escalate(deviation, eps0=EPS_INIT, step=EPS_STEP, floor=MIN_GROUP):
    """Admission mask for candidates given their deviations (index 0 always kept).

    The threshold starts at ``eps0`` and grows by ``step`` until at least
    ``floor`` candidates pass or all of them do. Returns ``(mask, eps)``.
    """
    dev = np.asarray(deviation, dtype=np.float64)
    need = min(floor, dev.shape[0])
    level = 0
    while True:
        # eps from the level count, not by accumulation, so 0.2 + 3 * 0.1 is exact enough to trace
        eps = eps0 + step * level
        mask = dev < eps
        mask[0] = True
        if mask.sum() >= need or not np.isfinite(dev[~mask]).any():
            return mask, eps
        level += 1


def rigidity_filter(center, candidates, rest, traj, eps0=EPS_INIT):
    """Rigid neighbour group of node ``center`` among ``candidates``.

    ``candidates[0]`` is the nearest node and is always kept; ``rest`` is
    ``(B, 3)`` and ``traj`` ``(T, B, 3)``.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.shape[0] < 1:
        raise InvalidArgument("need at least one candidate")
    rest = np.asarray(rest, dtype=np.float64)
    traj = np.asarray(traj, dtype=np.float64)
    dev = distance_deviation(rest[center], rest[candidates], traj[:, center], traj[:, candidates])
    mask, eps = escalate(dev, eps0)
    return RigidGroup(int(center), tuple(int(c) for c in candidates[mask]), eps)


def _kabsch(src, dst, w):
    """Batched weighted Kabsch. ``src``/``dst`` ``(..., K, 3)``, ``w`` ``(..., K)``.

    Returns rotations, translations and the ratio of the second to first
    singular value of the cross-covariance (degeneracy indicator).
    """
    wsum = w.sum(axis=-1, keepdims=True)
    wn = w / wsum
    cs = np.einsum("...k,...kd->...d", wn, src)
    cd = np.einsum("...k,...kd->...d", wn, dst)
    H = np.einsum("...k,...ki,...kj->...ij", wn, src - cs[..., None, :], dst - cd[..., None, :])
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.swapaxes(-1, -2) @ U.swapaxes(-1, -2)))
    d = np.where(d == 0.0, 1.0, d)
    D = np.zeros(H.shape)
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = d
    R = Vt.swapaxes(-1, -2) @ D @ U.swapaxes(-1, -2)
    t = cd - np.einsum("...ij,...j->...i", R, cs)
    top = np.where(S[..., 0] > 0.0, S[..., 0], 1.0)
    return R, t, np.where(S[..., 0] > 0.0, S[..., 1] / top, 0.0)


def procrustes(src, dst, weights=None) -> Se3:
    """Rigid motion minimising ``sum w_i |R src_i + t - dst_i|^2`` with ``det R = +1``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise InvalidArgument(f"src and dst must be matching (K, 3) arrays, got {src.shape} and {dst.shape}")
    if src.shape[0] < 3:
        raise InvalidArgument("procrustes needs at least 3 point pairs")
    w = np.ones(src.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (src.shape[0],) or not (w > 0).all():
        raise InvalidArgument("weights must be one positive value per point")
    R, t, ratio = _kabsch(src, dst, w)
    if ratio < DEGENERATE_SV:
        raise DegenerateGeometry("point configuration is colinear; rotation is not unique")
    return Se3(R, t)


def rigid_groups(rest_nodes, node_traj, k=DEFAULT_K, eps0=EPS_INIT):
    """Rigid group of every node: ``(members mask (B, k), candidate indices (B, k), eps (B,))``."""
    rest = as_cloud(rest_nodes, "rest_nodes")
    B = rest.shape[0]
    k = min(k, B)
    cand, _ = SpatialGrid(rest).query(rest, k)
    # the node itself leads its candidate list even when duplicates tie with it
    for p in range(B):
        if cand[p, 0] != p:
            row = [p] + [c for c in cand[p] if c != p]
            cand[p] = row[:k]
    traj = np.asarray(node_traj, dtype=np.float64)
    rest_d = np.linalg.norm(rest[cand] - rest[:, None, :], axis=-1)
    cur_d = np.linalg.norm(traj[:, cand] - traj[:, :, None, :], axis=-1)
    safe = np.where(rest_d > 0.0, rest_d, 1.0)
    dev = np.where(rest_d > 0.0, np.abs(cur_d / safe - 1.0).max(axis=0), 0.0)
    masks = np.zeros((B, k), dtype=bool)
    eps = np.zeros(B)
    for p in range(B):
        masks[p], eps[p] = escalate(dev[p], eps0)
    return masks, cand, eps


def estimate_transforms(graph: DeformationGraph, k=DEFAULT_K, eps0=EPS_INIT):
    """Fill ``graph.rotations``/``graph.translations`` and return them.

    Groups whose geometry is degenerate fall back to a pure translation by
    the mean displacement; their ``(frame, node)`` pairs are listed in
    ``graph.diagnostics["translation_only"]``.
    """
    rest = graph.rest_nodes
    traj = graph.node_traj
    masks, cand, eps = rigid_groups(rest, traj, k, eps0)
    T = traj.shape[0]
    w = masks.astype(np.float64)
    src = np.broadcast_to(rest[cand], (T,) + cand.shape + (3,))
    dst = traj[:, cand]
    wT = np.broadcast_to(w, (T,) + w.shape)
    R, t, ratio = _kabsch(src, dst, wT)
    small = masks.sum(axis=1) < 3
    bad = (ratio < DEGENERATE_SV) | small[None, :]
    if bad.any():
        fi, ni = np.nonzero(bad)
        wb = w[ni][..., None]
        R[fi, ni] = np.eye(3)
        t[fi, ni] = (wb * (dst - src)[fi, ni]).sum(axis=1) / wb.sum(axis=1)
        graph.diagnostics["translation_only"] = list(zip(fi.tolist(), ni.tolist()))
    graph.rotations = R
    graph.translations = t
    graph.diagnostics["group_eps"] = eps
    graph.diagnostics["group_size"] = masks.sum(axis=1)
    return R, t
