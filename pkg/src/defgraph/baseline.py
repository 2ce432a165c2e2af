"""Chained non-rigid ICP over the deformation-graph parameterisation.

Each frame alternates closest-point correspondences (warped source to target)
with a damped Gauss-Newton step on per-node rotations and positions, the
residual being point-to-point distance plus the as-rigid-as-possible graph
regulariser with every edge measured relative to its rest length. Frame
``i`` starts from frame ``i - 1``'s solution, so errors accumulate along the
sequence.
"""

from __future__ import annotations

import time

import numpy as np

from .core import RegistrationResult, SpatialGrid, as_cloud
from .deform import apply_increment, data_jacobian, graph_edges, pose_points, reg_energy, reg_terms, solve_increment
from .refiner import estimate_radii

LAMBDA_ARAP = 0.1
MAX_ITERS = 50
REL_TOL = 1e-6
TRUNCATE = 0.05
BIND_K = 4
MAX_FIT_POINTS = 4096


def bind_source(points, rest_nodes, k=BIND_K):
    """Nearest ``k`` nodes of every point with normalised Gaussian weights."""
    k = min(k, rest_nodes.shape[0])
    radii = estimate_radii(rest_nodes[None], rest_nodes)
    nodes, d2 = SpatialGrid(rest_nodes).query(points, k)
    w = np.exp(-d2 / (2.0 * radii[nodes] ** 2))
    w[w.sum(axis=1) <= 0, 0] = 1.0
    return nodes, w / w.sum(axis=1, keepdims=True)


class _Frame:
    def __init__(self, target, truncate):
        self.index = SpatialGrid(target)
        self.points = self.index.points
        self.tau2 = truncate * truncate

    def residuals(self, x):
        idx, d2 = self.index.query(x, 1)
        return idx[:, 0], d2[:, 0]


def fit_frame(source, nodes, weights, rest, edges, target, R, v, lam=LAMBDA_ARAP,
              max_iters=MAX_ITERS, tol=REL_TOL, truncate=TRUNCATE):
    """Register ``source`` to one target starting from ``(R, v)``.

    The cost is ``sum min(d^2, truncate^2) + lam * E_arap`` with ``d`` the
    distance to the closest target point. A step is kept only if it lowers
    the cost; otherwise the damping grows. Returns ``(R, v, energies)``.
    """
    fr = _Frame(target, truncate)
    B = rest.shape[0]
    scale = 1.0 / np.linalg.norm(rest[edges[:, 1]] - rest[edges[:, 0]], axis=1)

    def evaluate(R, v):
        x, y = pose_points(R, v, rest, source, nodes, weights)
        idx, d2 = fr.residuals(x)
        E = float(np.minimum(d2, fr.tau2).sum()) + lam * reg_energy(R, v, rest, edges, scale)
        return E, (x, y, idx, d2)

    E, cache = evaluate(R, v)
    energies = [E]
    damping = 1e-4
    for _ in range(max_iters):
        x, y, idx, d2 = cache
        inl = d2 < fr.tau2
        if not inl.any():
            break
        diff = (x - fr.points[idx])[inl]
        Jd = data_jacobian(y[inl], nodes[inl], weights[inl], B)
        rr, Jr = reg_terms(R, v, rest, edges, scale)
        accepted = False
        while damping < 1e8:
            d = solve_increment(Jd, diff.ravel(), np.ones(Jd.shape[0]), Jr, rr, lam, damping)
            Rn, vn = apply_increment(R, v, d)
            En, cn = evaluate(Rn, vn)
            if En <= E:
                accepted = True
                damping = max(damping * 0.3, 1e-8)
                break
            damping *= 10.0
        if not accepted:
            break
        change = (E - En) / max(E, 1e-300)
        R, v, E, cache = Rn, vn, En, cn
        energies.append(E)
        if change < tol:
            break
    return R, v, energies


def chained_nicp(source, seq, graph_rest, lam=LAMBDA_ARAP, max_iters=MAX_ITERS, tol=REL_TOL,
                 truncate=TRUNCATE, max_points=MAX_FIT_POINTS):
    """Sequential frame-to-frame registration of ``source`` to every frame of ``seq``."""
    src = as_cloud(source, "source")
    rest = as_cloud(graph_rest, "graph_rest")
    edges = graph_edges(rest)
    nodes_all, w_all = bind_source(src, rest)
    fit = np.arange(src.shape[0])
    if fit.size > max_points:
        fit = np.linspace(0, src.shape[0] - 1, max_points).astype(np.int64)
    B = rest.shape[0]
    R = np.tile(np.eye(3), (B, 1, 1))
    v = rest.copy()
    T = len(seq)
    warped = np.empty((T, src.shape[0], 3))
    seconds = np.zeros(T)
    skipped, energies = [], []
    for i, frame in enumerate(seq):
        t0 = time.perf_counter()
        target = np.asarray(frame, dtype=np.float64).reshape(-1, 3)
        if target.shape[0] == 0:
            skipped.append(i)
            energies.append([])
            warped[i] = src
            seconds[i] = time.perf_counter() - t0
            continue
        target = as_cloud(target, f"frame {i}")
        R, v, e = fit_frame(src[fit], nodes_all[fit], w_all[fit], rest, edges, target, R, v,
                            lam, max_iters, tol, truncate)
        energies.append(e)
        warped[i] = pose_points(R, v, rest, src, nodes_all, w_all)[0]
        seconds[i] = time.perf_counter() - t0
    return RegistrationResult(warped, seconds, None, {"skipped": skipped, "energies": energies})
