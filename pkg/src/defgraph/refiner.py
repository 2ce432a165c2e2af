"""Sliding-window refinement of node trajectories and node radius estimation.

Frames are processed in half-overlapping windows of ``T_w`` frames. Inside a
window the free node positions minimise

    E = E_reg + lambda_node * E_node + lambda_rigid * E_rigid

with a Huber pull towards soft closest target points (``E_reg``), an anchor to
the coarse matcher output (``E_node``) and local rigidity: squared edge
length deviations on the rest 4-NN graph plus squared temporal second differences
(``E_rigid``). Frames already solved by the previous window are frozen and
copied, so every overlap frame has exactly one value. The last frozen frames
still enter the temporal term as constants, which blends the free frames
into the previous window's solution.

Soft correspondences are computed once per window from the coarse positions,
which keeps the energy fixed while it is being minimised: every accepted step
is non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .core import InvalidArgument, NumericalFailure, SpatialGrid, as_cloud
from .matcher import MatchParams, TargetFrame, projectors, soft_correspondences, support
from .triplane import sample_points

HUBER_DELTA = 0.01
CORR_SIGMA = 0.02
MIN_STEP = 1e-8
RADIUS_K = 4


@dataclass
class EnergyWeights:
    lambda_node: float = 1.0
    lambda_rigid: float = 0.1
    alpha: float = 0.8

    def __post_init__(self):
        if min(self.lambda_node, self.lambda_rigid, self.alpha) <= 0:
            raise InvalidArgument("energy weights must be positive")
        if self.alpha >= 1:
            raise InvalidArgument("alpha must be below 1")


@dataclass
class Window:
    """Frames ``[start, start + length)``; ``frozen`` leading frames were copied in."""

    start: int
    length: int
    node_pos: np.ndarray
    frozen: int = 0
    energies: list = field(default_factory=list)

    @property
    def stop(self):
        return self.start + self.length


def window_starts(T, Tw):
    """Window start frames: ``0, Tw/2, Tw, ...`` with the last one clamped to the end."""
    if T < 1:
        raise InvalidArgument("sequence has no frames")
    if Tw < 2 or Tw % 2:
        raise InvalidArgument(f"window length must be even and >= 2, got {Tw}")
    if T <= Tw:
        return [0]
    starts = list(range(0, T - Tw, Tw // 2))
    starts.append(T - Tw)
    return starts


def huber(s, delta=HUBER_DELTA):
    return np.where(s <= delta, 0.5 * s * s, delta * (s - 0.5 * delta))


def rigidity_edges(rest_nodes, k=RADIUS_K):
    """Undirected rest 4-NN pairs ``(E, 2)`` with ``p < q`` and their rest lengths."""
    rest = as_cloud(rest_nodes, "rest_nodes")
    kk = min(k, rest.shape[0] - 1)
    if kk < 1:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    idx, _ = SpatialGrid(rest).query(rest, kk + 1)
    pairs = []
    for p in range(rest.shape[0]):
        for q in idx[p]:
            if q != p:
                pairs.append((min(p, q), max(p, q)))
    pairs = np.unique(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=0)
    length = np.linalg.norm(rest[pairs[:, 0]] - rest[pairs[:, 1]], axis=1)
    keep = length > 0
    return pairs[keep], length[keep]


def _second_difference(F):
    """``(F - 2, F)`` second-difference operator."""
    if F < 3:
        return sp.csr_matrix((0, F))
    n = F - 2
    i = np.arange(n)
    rows = np.concatenate([i, i, i])
    cols = np.concatenate([i, i + 1, i + 2])
    vals = np.concatenate([np.ones(n), -2.0 * np.ones(n), np.ones(n)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, F))


class WindowEnergy:
    """Energy of one window as a function of its free node positions.

    ``fixed`` holds the frozen leading frames ``(Ff, B, 3)`` (may be empty);
    the free block is ``(F, B, 3)``. ``mu``, ``L`` and ``w`` are the soft
    targets, pull matrices and support weights of the free frames.
    """

    def __init__(self, fixed, coarse, mu, L, w, edges, lengths, weights: EnergyWeights, delta=HUBER_DELTA):
        self.fixed = np.asarray(fixed, dtype=np.float64)
        self.coarse = np.asarray(coarse, dtype=np.float64)
        self.F, self.B = self.coarse.shape[:2]
        self.mu, self.L, self.w = mu, L, w
        self.P = np.einsum("fbij,fbkj->fbik", L, L)
        self.edges, self.lengths = edges, lengths
        self.edge_w = np.ones_like(lengths)
        self.weights = weights
        self.delta = delta
        # temporal rows touching at least one free frame; frozen frames act as constants
        Ff = self.fixed.shape[0]
        D = _second_difference(Ff + self.F).tocsr()
        if D.shape[0]:
            touches = np.asarray(D[:, Ff:].getnnz(axis=1)).ravel() > 0
            D = D[np.flatnonzero(touches)]
        self.D_fixed = D[:, :Ff]
        self.D_free = D[:, Ff:].tocsr()

    def _split(self, x):
        return np.asarray(x, dtype=np.float64).reshape(self.F, self.B, 3)

    def _accel(self, v):
        flat = v.reshape(self.F, -1)
        a = self.D_free @ flat
        if self.fixed.shape[0]:
            a = a + self.D_fixed @ self.fixed.reshape(self.fixed.shape[0], -1)
        return a

    def terms(self, x):
        """``(E_reg, E_node, E_rigid)`` unweighted."""
        v = self._split(x)
        r = np.einsum("fbij,fbj->fbi", self.L, v - self.mu)
        s = np.linalg.norm(r, axis=-1)
        e_reg = float((self.w * huber(s, self.delta)).sum())
        e_node = float(((v - self.coarse) ** 2).sum())
        p, q = self.edges[:, 0], self.edges[:, 1]
        strain = np.linalg.norm(v[:, p] - v[:, q], axis=-1) - self.lengths
        e_edge = float((self.edge_w * strain * strain).sum())
        a = self._accel(v)
        e_time = float((a * a).sum())
        return e_reg, e_node, e_edge + e_time

    def energy(self, x):
        e_reg, e_node, e_rigid = self.terms(x)
        return e_reg + self.weights.lambda_node * e_node + self.weights.lambda_rigid * e_rigid

    def gradient(self, x):
        v = self._split(x)
        lam_n, lam_r = self.weights.lambda_node, self.weights.lambda_rigid
        diff = v - self.mu
        r = np.einsum("fbij,fbj->fbi", self.L, diff)
        s = np.linalg.norm(r, axis=-1)
        psi = self.w * np.where(s <= self.delta, 1.0, self.delta / np.maximum(s, 1e-300))
        g = psi[..., None] * np.einsum("fbij,fbj->fbi", self.P, diff)
        g += 2.0 * lam_n * (v - self.coarse)
        p, q = self.edges[:, 0], self.edges[:, 1]
        d = v[:, p] - v[:, q]
        n = np.linalg.norm(d, axis=-1)
        u = d / np.maximum(n, 1e-300)[..., None]
        c = (2.0 * lam_r * self.edge_w * (n - self.lengths))[..., None] * u
        ge = np.zeros_like(v)
        for f in range(self.F):
            np.add.at(ge[f], p, c[f])
            np.add.at(ge[f], q, -c[f])
        g += ge
        a = self._accel(v)
        g += (2.0 * lam_r * (self.D_free.T @ a)).reshape(v.shape)
        return g.ravel()

    def gauss_newton(self, x):
        """Gradient and a positive definite Gauss-Newton (IRLS for the Huber part) matrix.

        Edge terms keep the non-negative part of their exact Hessian.
        """
        v = self._split(x)
        F, B = self.F, self.B
        N = 3 * F * B
        lam_n, lam_r = self.weights.lambda_node, self.weights.lambda_rigid
        r = np.einsum("fbij,fbj->fbi", self.L, v - self.mu)
        s = np.linalg.norm(r, axis=-1)
        psi = self.w * np.where(s <= self.delta, 1.0, self.delta / np.maximum(s, 1e-300))
        blocks = psi[..., None, None] * self.P + 2.0 * lam_n * np.eye(3)
        base = (np.arange(F * B) * 3)
        rows = (base[:, None, None] + np.arange(3)[None, :, None]).repeat(3, axis=2)
        cols = (base[:, None, None] + np.arange(3)[None, None, :]).repeat(3, axis=1)
        H = sp.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(N, N))

        p, q = self.edges[:, 0], self.edges[:, 1]
        d = v[:, p] - v[:, q]
        n = np.linalg.norm(d, axis=-1)
        u = d / np.maximum(n, 1e-300)[..., None]
        outer = u[..., :, None] * u[..., None, :]
        # stretched edges also curve across the edge direction; compressed ones are left out to stay PSD
        bend = np.maximum(1.0 - self.lengths / np.maximum(n, 1e-300), 0.0)[..., None, None]
        uu = (2.0 * lam_r * self.edge_w)[None, :, None, None] * (outer + bend * (np.eye(3) - outer))
        fo = (np.arange(F) * B)[:, None]
        ip = ((fo + p) * 3)[..., None, None] + np.arange(3)[:, None]
        iq = ((fo + q) * 3)[..., None, None] + np.arange(3)[:, None]
        jp = ((fo + p) * 3)[..., None, None] + np.arange(3)[None, :]
        jq = ((fo + q) * 3)[..., None, None] + np.arange(3)[None, :]
        shape3 = uu.shape
        er = np.concatenate([np.broadcast_to(a, shape3).ravel() for a in (ip, iq, ip, iq)])
        ec = np.concatenate([np.broadcast_to(a, shape3).ravel() for a in (jp, jq, jq, jp)])
        ev = np.concatenate([uu.ravel(), uu.ravel(), -uu.ravel(), -uu.ravel()])
        H = H + sp.csr_matrix((ev, (er, ec)), shape=(N, N))
        if self.D_free.shape[0]:
            DtD = (self.D_free.T @ self.D_free).tocsr()
            H = H + 2.0 * lam_r * sp.kron(DtD, sp.identity(3 * B), format="csr")
        return self.gradient(x), H


def check_gradient(problem: WindowEnergy, x, h=1e-6):
    """Relative error between the analytic gradient and central differences."""
    x = np.asarray(x, dtype=np.float64).ravel()
    g = problem.gradient(x)
    fd = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fd[i] = (problem.energy(x + e) - problem.energy(x - e)) / (2 * h)
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-300))


def minimise(problem: WindowEnergy, x0, M, alpha=0.8, min_step=MIN_STEP):
    """``M`` damped Gauss-Newton rounds; the step of round ``m`` is scaled by ``alpha^m``.

    A step that raises the energy is halved until it does not; once the scale
    drops below ``min_step`` the current (best) iterate is returned.
    Returns ``(x, energies)`` with the energy of every accepted iterate.
    """
    x = np.asarray(x0, dtype=np.float64).ravel().copy()
    E = problem.energy(x)
    energies = [E]
    for m in range(M):
        g, H = problem.gauss_newton(x)
        diag = H.diagonal()
        H = H + sp.diags(1e-12 * max(float(diag.max()), 1.0) * np.ones_like(diag))
        d = np.asarray(spsolve(H.tocsc(), -g))
        if not np.isfinite(d).all():
            raise NumericalFailure("refinement step is not finite")
        scale = alpha ** m
        while scale >= min_step:
            trial = x + scale * d
            Et = problem.energy(trial)
            if Et <= E:
                x, E = trial, Et
                energies.append(E)
                break
            scale *= 0.5
        else:
            break
    return x, energies


def _frame(f, grid):
    if isinstance(f, TargetFrame):
        return f
    if grid is None:
        raise InvalidArgument("a grid is required for every frame")
    return TargetFrame(f, grid)


def window_terms(frames, v, node_feat, sigma=CORR_SIGMA, params=None):
    """Soft targets ``mu``, pull square roots ``L`` and weights ``w`` for frames ``(F, B, 3)``."""
    params = params or MatchParams()
    F, B = v.shape[:2]
    mu = np.empty((F, B, 3))
    L = np.empty((F, B, 3, 3))
    w = np.empty((F, B))
    root = np.sqrt(params.tangent_weight)
    for i, fr in enumerate(frames):
        feat = node_feat if node_feat is not None else sample_points(fr.grid, v[i])
        m, n, flat = soft_correspondences(v[i], fr, feat, sigma, params)
        mu[i] = m
        L[i] = projectors(n, root)
        L[i][flat] = np.eye(3)
        w[i] = (support(v[i], fr, params.votes) > 0).astype(np.float64)
    return mu, L, w


def refine(seq, grids, coarse_nodes, rest_nodes, weights: EnergyWeights | None = None, M=6,
           window=8, node_feat=None, params=None, return_windows=False):
    """Refined ``(T, B, 3)`` node trajectories.

    ``seq`` holds target clouds (or prepared :class:`TargetFrame` objects, in
    which case ``grids`` may be ``None``). ``node_feat`` are the rest node
    features used to weigh correspondences; by default each frame's own grid
    sampled at the coarse positions.
    """
    weights = weights or EnergyWeights()
    coarse = np.asarray(coarse_nodes, dtype=np.float64)
    rest = as_cloud(rest_nodes, "rest_nodes")
    T = len(seq)
    if T < 1:
        raise InvalidArgument("sequence has no frames")
    if M < 1:
        raise InvalidArgument("M must be >= 1")
    if coarse.shape != (T, rest.shape[0], 3):
        raise InvalidArgument(f"coarse_nodes must be ({T}, {rest.shape[0]}, 3), got {coarse.shape}")
    if not np.isfinite(coarse).all():
        raise InvalidArgument("coarse_nodes contain non-finite values")
    if grids is None:
        grids = [None] * T
    frames = [_frame(f, g) for f, g in zip(seq, grids)]
    if node_feat is not None:
        node_feat = np.asarray(node_feat, dtype=np.float64)
        if node_feat.shape[-1] != frames[0].features.shape[1]:
            node_feat = np.tile(node_feat, 3)
    edges, lengths = rigidity_edges(rest)

    out = coarse.copy()
    done = 0  # frames [0, done) are final
    windows = []
    for start in window_starts(T, window):
        stop = min(start + window, T)
        frozen = max(done - start, 0)
        free = slice(start + frozen, stop)
        pos = out[start:stop].copy()
        if free.start < stop:
            mu, L, w = window_terms(frames[free], coarse[free], node_feat, params=params)
            # the two frames before the free block also feed the temporal term
            lead = max(free.start - 2, 0)
            fixed = out[lead:free.start]
            problem = WindowEnergy(fixed, coarse[free], mu, L, w, edges, lengths, weights)
            x, energies = minimise(problem, coarse[free], M, weights.alpha)
            pos[frozen:] = x.reshape(stop - free.start, -1, 3)
        else:
            energies = []
        out[start:stop] = pos
        done = stop
        windows.append(Window(start, stop - start, pos, frozen, energies))
    return (out, windows) if return_windows else out


def motion_coherence(node_traj, rest_nodes, k=RADIUS_K):
    """Mean cosine between each node's displacement and its neighbours', clipped to ``[0, 1]``.

    Displacements are taken from the rest positions; a zero displacement is
    coherent with anything.
    """
    rest = as_cloud(rest_nodes, "rest_nodes")
    traj = np.asarray(node_traj, dtype=np.float64)
    B = rest.shape[0]
    kk = min(k, B - 1)
    if kk < 1:
        return np.ones(B)
    idx, _ = SpatialGrid(rest).query(rest, kk + 1)
    nbrs = np.array([[q for q in row if q != p][:kk] for p, row in enumerate(idx)])
    disp = traj - rest[None]
    norm = np.linalg.norm(disp, axis=-1)
    scale = max(float(np.abs(rest).max()), 1.0)
    tiny = norm <= 1e-12 * scale
    unit = disp / np.where(tiny, 1.0, norm)[..., None]
    cos = np.einsum("tbd,tbkd->tbk", unit, unit[:, nbrs])
    cos = np.where(tiny[:, :, None] | tiny[:, nbrs], 1.0, cos)
    return np.clip(cos.mean(axis=(0, 2)), 0.0, 1.0)


def estimate_radii(node_traj, rest_nodes, k=RADIUS_K):
    """Node radii ``(0.7 + 0.6 coh) * median distance to the k nearest rest neighbours``."""
    rest = as_cloud(rest_nodes, "rest_nodes")
    traj = np.asarray(node_traj, dtype=np.float64)
    if traj.ndim != 3 or traj.shape[1:] != rest.shape:
        raise InvalidArgument("node_traj must be (T, B, 3)")
    if not np.isfinite(traj).all():
        raise InvalidArgument("node_traj contains non-finite values")
    B = rest.shape[0]
    if B < 2:
        return np.ones(B)
    kk = min(k, B - 1)
    _, d2 = SpatialGrid(rest).query(rest, kk + 1)
    spacing = np.median(np.sqrt(d2[:, 1:]), axis=1)
    floor = max(float(np.median(spacing)), 1e-12)
    spacing = np.where(spacing > 0, spacing, floor)
    return (0.7 + 0.6 * motion_coherence(traj, rest, k)) * spacing
