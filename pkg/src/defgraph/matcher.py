"""Coarse node-to-frame matching.

Every frame is matched independently, starting from the rest nodes. Each of
the ``M`` rounds anneals a Gaussian bandwidth and a stiffness, fits the node
motions to the target and then pulls the nodes onto descriptor-weighted soft
closest points, smoothing the residual offsets over the rest-node graph.

The first round begins with one rigid motion shared by all nodes, tried from
several starting rotations. Every round then fits an embedded deformation
graph (per-node rotation and position, neighbours predicting each other)
whose stiffness relaxes from near rigid to flexible. Both fits run from the
target towards the model: each target point finds the nearest point of the
posed dense source surface, because on a partial frame every observed point
has a counterpart on the full model while many nodes have none. Nodes that no
target point claims (occluded) get no data pull and are carried along by
their neighbours.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .core import DefGraphError, InvalidArgument, SpatialGrid, as_cloud, neighbor_graph, rotvec_matrix
from .deform import apply_increment, skew, data_jacobian, graph_edges, pose_points, reg_terms, solve_increment
from .triplane import TriplaneGrid, compute_descriptors, cosine_rows, sample_points

K_MATCH = 16
SIGMA_START = 0.2
SIGMA_END = 0.02
ETA = 0.5
BETA = 0.3
SMOOTH_K = 4
START_ANGLES = (30.0, 60.0)
START_MARGIN = 0.8
LAM_START = 100.0
LAM_END = 1.0


@dataclass
class MatchParams:
    k_match: int = K_MATCH
    sigma_start: float = SIGMA_START
    sigma_end: float = SIGMA_END
    eta: float = ETA
    beta: float = BETA
    smooth_k: int = SMOOTH_K
    rigid_iters: int = 10      # shared rigid ICP updates before the first graph fit
    fit_iters: int = 5         # Gauss-Newton updates of the graph fit per round
    tangent_weight: float = 0.1  # in-plane share of the correspondence pull
    votes: int = 3             # nodes claimed by each target point
    lam_start: float = LAM_START
    lam_end: float = LAM_END


@dataclass
class MatchState:
    """Loop state: node positions, node features and the finished round count."""

    node_pos: np.ndarray
    node_desc: np.ndarray
    iteration: int = 0
    rotations: np.ndarray | None = None


class TargetFrame:
    """A target cloud with its search index, normals and per-point triplane features."""

    def __init__(self, points, grid: TriplaneGrid, desc=None):
        self.points = as_cloud(points, "target")
        self.grid = grid
        if desc is None:
            desc = compute_descriptors(self.points)
        self.normals = np.ascontiguousarray(desc[:, 2:5])
        self.features = sample_points(grid, self.points)
        self.index = SpatialGrid(self.points)

    def __len__(self):
        return self.points.shape[0]


def sigma_schedule(M, start=SIGMA_START, end=SIGMA_END):
    """Geometric bandwidths from ``start`` to ``end`` over ``M`` rounds."""
    if M < 1:
        raise InvalidArgument("M must be >= 1")
    if M == 1:
        return np.array([start])
    return start * (end / start) ** (np.arange(M) / (M - 1))


def projectors(normals, tangent_weight):
    """``(B, 3, 3)`` matrices ``n n^T + kappa (I - n n^T)``."""
    nn = normals[:, :, None] * normals[:, None, :]
    return nn + tangent_weight * (np.eye(3) - nn)


def soft_correspondences(v, frame: TargetFrame, node_feat, sigma, params: MatchParams):
    """Soft closest points ``mu``, local normals and a data-available flag per node.

    Weights are ``exp(-(d^2 - d_min^2) / 2 sigma^2) * max(0, cos)``; the shift by
    the nearest distance only guards against underflow. A node whose weights
    all vanish uses its geometric closest point.
    """
    k = min(params.k_match, len(frame))
    idx, d2 = frame.index.query(v, k)
    cos = cosine_rows(frame.features[idx], node_feat[:, None, :])
    s = np.exp(-(d2 - d2[:, :1]) / (2.0 * sigma * sigma)) * np.maximum(cos, 0.0)
    ssum = s.sum(axis=1)
    dead = ssum <= 0.0
    if dead.any():
        s[dead] = 0.0
        s[dead, 0] = 1.0
        ssum[dead] = 1.0
    s /= ssum[:, None]
    mu = np.einsum("bk,bkd->bd", s, frame.points[idx])
    nrm = frame.normals[idx]
    # normals carry a sign convention only; align them with the dominant one
    lead = nrm[np.arange(len(v)), np.argmax(s, axis=1)]
    sign = np.where(np.einsum("bkd,bd->bk", nrm, lead) < 0.0, -1.0, 1.0)
    n = np.einsum("bk,bkd->bd", s * sign, nrm)
    nlen = np.linalg.norm(n, axis=1)
    flat = nlen < 0.5  # normals disagree: no reliable tangent plane
    n = np.where(flat[:, None], 0.0, n / np.where(nlen > 0, nlen, 1.0)[:, None])
    return mu, n, flat


def support(v, frame: TargetFrame, votes=3):
    """Number of target points that have each node among their ``votes`` nearest."""
    k = min(votes, len(v))
    idx, _ = SpatialGrid(v).query(frame.points, k)
    return np.bincount(idx.ravel(), minlength=len(v))


def correspondence_terms(v, frame, node_feat, sigma, params: MatchParams):
    """``(mu, P, w)``: soft targets, pull matrices and support weights per node."""
    mu, n, flat = soft_correspondences(v, frame, node_feat, sigma, params)
    P = projectors(n, params.tangent_weight)
    P[flat] = np.eye(3)
    w = (support(v, frame, params.votes) > 0).astype(np.float64)
    return mu, P, w


class SourceModel:
    """Dense source surface used by the rigid fits; each sample follows its nearest node."""

    def __init__(self, points, normals, rest_nodes, max_points=4096):
        pts = as_cloud(points, "source")
        nrm = np.asarray(normals, dtype=np.float64)
        if nrm.shape != pts.shape:
            raise InvalidArgument("need one normal per source point")
        if pts.shape[0] > max_points:
            keep = np.linspace(0, pts.shape[0] - 1, max_points).astype(np.int64)
            pts, nrm = pts[keep], nrm[keep]
        self.points = pts
        self.normals = nrm
        self.owner = SpatialGrid(rest_nodes).query(pts, 1)[0][:, 0]

    @classmethod
    def from_nodes(cls, rest_nodes, rest_desc):
        nrm = np.asarray(rest_desc, dtype=np.float64)[:, 2:5]
        norm = np.linalg.norm(nrm, axis=1, keepdims=True)
        nrm = np.where(norm > 0, nrm / np.where(norm > 0, norm, 1.0), (0.0, 0.0, 1.0))
        return cls(rest_nodes, nrm, rest_nodes)


def _rigid_update(model_pts, model_nrm, target_pts, sigma, tangent):
    """One Gauss-Newton step of robust target-to-model ICP for one shared motion.

    The residual is the plane distance plus ``tangent`` times the squared
    point distance, so flat targets still pin down in-plane motion.
    Returns ``(dR, c, tau)`` meaning ``x -> dR (x - c) + c + tau``.
    """
    idx, d2 = SpatialGrid(model_pts).query(target_pts, 1)
    idx = idx[:, 0]
    vp = model_pts[idx]
    n = model_nrm[idx]
    diff = vp - target_pts
    r = np.einsum("ij,ij->i", n, diff)
    w = 1.0 / (1.0 + (r * r + 0.1 * d2[:, 0]) / (sigma * sigma))
    c = (w[:, None] * vp).sum(axis=0) / w.sum()
    x = vp - c
    J = np.concatenate([np.cross(x, n), n], axis=1)
    A = np.einsum("i,ij,ik->jk", w, J, J)
    g = (w * r) @ J
    # point-to-point part: d(x - q) = -[x]_x omega + tau
    S = skew(x)
    sw = tangent * w
    A[:3, :3] -= np.einsum("i,ijk,ikl->jl", sw, S, S)
    A[:3, 3:] += np.einsum("i,ijk->jk", sw, S)
    A[3:, :3] = A[:3, 3:].T
    A[3:, 3:] += sw.sum() * np.eye(3)
    g[:3] += sw @ np.cross(x, diff)
    g[3:] += sw @ diff
    A += 1e-9 * (np.trace(A) + 1e-12) * np.eye(6)
    try:
        step = -np.linalg.solve(A, g)
    except np.linalg.LinAlgError:
        return np.eye(3), np.zeros(3), np.zeros(3)
    return rotvec_matrix(step[None, :3])[0], c, step[3:]


def _fit_rigid(model: SourceModel, target_pts, R, v, rest, sigma, iters, tangent):
    """Move every node by one common rigid motion fitted to the target."""
    x0, _ = pose_points(R, v, rest, model.points, model.owner[:, None], np.ones((len(model.owner), 1)))
    n0 = np.einsum("nij,nj->ni", R[model.owner], model.normals)
    G, c0 = _rigid_icp(x0, n0, target_pts, sigma, iters, tangent)
    dR, tau = G
    return dR @ R, (v - c0) @ dR.T + c0 + tau


def start_rotations(angles=START_ANGLES):
    """Identity plus rotations by each angle (degrees) about the six signed axes."""
    out = [np.eye(3)]
    for a in angles:
        for axis in np.vstack([np.eye(3), -np.eye(3)]):
            out.append(rotvec_matrix(np.deg2rad(a) * axis[None, :])[0])
    return out


def _score(x, target_pts, scale=0.02):
    """Mean Geman-McClure cost of target-to-model distances (lower is better)."""
    _, d2 = SpatialGrid(x).query(target_pts, 1)
    return float(np.mean(d2[:, 0] / (d2[:, 0] + scale * scale)))


def _rigid_icp(x0, n0, target_pts, sigma, iters, tangent, starts=None, probe=3):
    """Best rigid motion ``(R, tau)`` about the model centroid over several starts.

    Each start gets ``probe`` updates; the best scoring one then runs to
    ``iters``. Returns ``((R, tau), c)`` meaning ``x -> R (x - c) + c + tau``.
    """
    c = x0.mean(axis=0)

    def run(R, tau, n):
        for _ in range(n):
            x = (x0 - c) @ R.T + c + tau
            dR, cc, dt = _rigid_update(x, n0 @ R.T, target_pts, sigma, tangent)
            R = dR @ R
            tau = dR @ (c + tau - cc) + cc + dt - c
        return R, tau

    best = None
    for R0 in (start_rotations() if starts is None else starts):
        R, tau = run(R0, np.zeros(3), probe)
        score = _score((x0 - c) @ R.T + c + tau, target_pts)
        # a clear gain is needed, so near-ties keep the smaller starting rotation
        if best is None or score < START_MARGIN * best[0]:
            best = (score, R, tau)
    return run(best[1], best[2], max(iters - probe, 0)), c


def _fit_graph(model: SourceModel, target_pts, R, v, rest, edges, sigma, lam, iters, tangent):
    """Robust target-to-model point-to-plane fit of the node motions.

    Each target point pulls the nearest point of the posed model; ``lam``
    weighs the embedded-deformation regulariser, so a large value keeps the
    motion close to rigid and a small one lets it bend.
    """
    B = rest.shape[0]
    owner = model.owner[:, None]
    ones = np.ones((model.points.shape[0], 1))
    for _ in range(iters):
        x, y = pose_points(R, v, rest, model.points, owner, ones)
        nrm = np.einsum("nij,nj->ni", R[model.owner], model.normals)
        idx, d2 = SpatialGrid(x).query(target_pts, 1)
        idx = idx[:, 0]
        diff = x[idx] - target_pts
        r = np.einsum("ij,ij->i", nrm[idx], diff)
        # Cauchy weights on the plane distance, with a small in-plane share so far points count less
        w = 1.0 / (1.0 + (r * r + 0.1 * d2[:, 0]) / (sigma * sigma))
        Jn = data_jacobian(y[idx], owner[idx], ones[idx], B, normals=nrm[idx])
        Jp = data_jacobian(y[idx], owner[idx], ones[idx], B)
        Jd = sp.vstack([Jn, Jp]).tocsr()
        rd = np.concatenate([r, diff.ravel()])
        wd = np.concatenate([w, tangent * np.repeat(w, 3)])
        rr, Jr = reg_terms(R, v, rest, edges)
        d = solve_increment(Jd, rd, wd, Jr, rr, lam)
        R, v = apply_increment(R, v, d)
    return R, v


def stiffness_schedule(M, start=LAM_START, end=LAM_END):
    """Regulariser weights per round, geometric from ``start`` (near rigid) to ``end``."""
    if M == 1:
        return np.array([start])
    return start * (end / start) ** (np.arange(M) / (M - 1))


def match_frame(rest_nodes, rest_desc, target, target_grid=None, iterations=6, params=None,
                neighbors=None, model=None, edges=None, return_state=False):
    """Node positions ``V^M`` in one target frame, starting from ``rest_nodes``.

    ``rest_desc`` holds one feature row per node (``3C`` triplane samples or
    ``C`` descriptors, tiled). ``target`` is a cloud or a :class:`TargetFrame`.
    ``model`` is the dense surface for the graph fits; by default the nodes
    themselves with the normals found in ``rest_desc``.
    """
    params = params or MatchParams()
    rest = as_cloud(rest_nodes, "rest_nodes")
    M = int(iterations)
    if M < 1:
        raise InvalidArgument("iterations must be >= 1")
    if not isinstance(target, TargetFrame):
        if target_grid is None:
            raise InvalidArgument("a target grid is required")
        target = TargetFrame(target, target_grid)
    feat = np.asarray(rest_desc, dtype=np.float64)
    if feat.shape[0] != rest.shape[0]:
        raise InvalidArgument("need one descriptor per rest node")
    if model is None:
        model = SourceModel.from_nodes(rest, feat)
    if feat.shape[-1] != target.features.shape[1]:
        feat = np.tile(feat, 3)
    nbrs = neighbor_graph(rest, params.smooth_k) if neighbors is None else neighbors
    if edges is None:
        edges = graph_edges(rest, params.smooth_k)
    sigmas = sigma_schedule(M, params.sigma_start, params.sigma_end)
    lams = stiffness_schedule(M, params.lam_start, params.lam_end)

    B = rest.shape[0]
    R = np.tile(np.eye(3), (B, 1, 1))
    v = rest.copy()
    state = MatchState(v, feat, 0, R)
    for m in range(M):
        sigma = sigmas[m]
        if m == 0:
            R, v = _fit_rigid(model, target.points, R, v, rest, sigma, params.rigid_iters, params.tangent_weight)
        R, v = _fit_graph(model, target.points, R, v, rest, edges, sigma, lams[m],
                          params.fit_iters, params.tangent_weight)
        mu, P, w = correspondence_terms(v, target, feat, sigma, params)
        res = params.eta * w[:, None] * np.einsum("bij,bj->bi", P, mu - v)
        if nbrs.shape[1]:
            res = res + params.beta * (res[nbrs].mean(axis=1) - res)
        v = v + res
        if m + 1 == M // 2:
            feat = sample_points(target.grid, v)
        state = MatchState(v, feat, m + 1, R)
    return state if return_state else state.node_pos


def match_sequence(rest_nodes, rest_desc, frames, iterations=6, params=None, threads=1, model=None):
    """``(T, B, 3)`` matched nodes; frames are independent and may run in parallel."""
    rest = as_cloud(rest_nodes, "rest_nodes")
    params = params or MatchParams()
    nbrs = neighbor_graph(rest, params.smooth_k)
    edges = graph_edges(rest, params.smooth_k)
    if model is None:
        model = SourceModel.from_nodes(rest, rest_desc)

    def run(i):
        try:
            return match_frame(rest, rest_desc, frames[i], iterations=iterations, params=params,
                               neighbors=nbrs, model=model, edges=edges)
        except DefGraphError as exc:
            raise type(exc)(f"frame {i}: {exc}") from exc

    if threads > 1 and len(frames) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(run, range(len(frames))))
    else:
        out = [run(i) for i in range(len(frames))]
    return np.stack(out)
