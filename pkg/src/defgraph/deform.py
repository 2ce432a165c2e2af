"""Embedded deformation: per-node rotations and positions driving bound surface points.

A surface point ``s`` bound to nodes ``a`` with normalised weights ``w_a``
moves to ``sum_a w_a (R_a (s - g_a) + v_a)``, where ``g_a`` is the node's rest
position and ``v_a`` its current position. The regulariser asks every node to
predict its graph neighbours: ``e_pq = R_p (g_q - g_p) + v_p - v_q``.

Gauss-Newton increments are ``(omega_p, tau_p)`` per node, rotating about the
node's current position: ``R_p <- exp(omega_p) R_p``, ``v_p <- v_p + tau_p``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.linalg import spsolve

from .core import neighbor_graph, rotvec_matrix

DENSE_FILL = 0.025


def graph_edges(rest_nodes, k=4):
    """Directed edges ``(E, 2)`` of the symmetrised k-nearest-neighbour graph."""
    nbrs = neighbor_graph(rest_nodes, k)
    B = nbrs.shape[0]
    e = np.stack([np.repeat(np.arange(B), nbrs.shape[1]), nbrs.ravel()], axis=1)
    both = np.concatenate([e, e[:, ::-1]])
    return np.unique(both, axis=0)


def skew(v):
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


def pose_points(R, v, rest_nodes, points, nodes, weights):
    """Deformed points and the per-binding lever arms ``y = R_a (s - g_a)`` ``(n, k, 3)``."""
    y = np.einsum("nkij,nkj->nki", R[nodes], points[:, None, :] - rest_nodes[nodes])
    x = np.einsum("nk,nki->ni", weights, y + v[nodes])
    return x, y


def data_jacobian(y, nodes, weights, B, normals=None):
    """Sparse Jacobian of point residuals w.r.t. node increments.

    With ``normals`` the residual of point ``i`` is ``n_i . (x_i - q_i)`` (one
    row); otherwise ``x_i - q_i`` (three rows).
    """
    n, k = nodes.shape
    cols_r = nodes[:, :, None] * 6 + np.arange(3)
    cols_t = cols_r + 3
    if normals is not None:
        # d(n.x)/d omega_a = w_a (y_a x n), d(n.x)/d tau_a = w_a n
        vr = weights[:, :, None] * np.cross(y, normals[:, None, :])
        vt = weights[:, :, None] * np.broadcast_to(normals[:, None, :], y.shape)
        rows = np.broadcast_to(np.arange(n)[:, None, None], (n, k, 3))
        data = np.concatenate([vr.ravel(), vt.ravel()])
        r = np.concatenate([rows.ravel(), rows.ravel()])
        c = np.concatenate([cols_r.ravel(), cols_t.ravel()])
        return sp.csr_matrix((data, (r, c)), shape=(n, 6 * B))
    # d x / d omega_a = -w_a [y_a]x, d x / d tau_a = w_a I
    Sr = -weights[:, :, None, None] * skew(y)  # (n, k, 3, 3)
    rows = np.broadcast_to((np.arange(n)[:, None, None, None] * 3 + np.arange(3)[None, None, :, None]),
                           (n, k, 3, 3))
    cr = np.broadcast_to(cols_r[:, :, None, :], (n, k, 3, 3))
    eye_rows = np.broadcast_to(np.arange(n)[:, None, None] * 3 + np.arange(3), (n, k, 3))
    ct = cols_t
    data = np.concatenate([Sr.ravel(), np.broadcast_to(weights[:, :, None], (n, k, 3)).ravel()])
    r = np.concatenate([rows.ravel(), eye_rows.ravel()])
    c = np.concatenate([cr.ravel(), ct.ravel()])
    return sp.csr_matrix((data, (r, c)), shape=(3 * n, 6 * B))


def reg_terms(R, v, rest_nodes, edges, scale=None):
    """Regulariser residuals ``(3E,)`` and their sparse Jacobian.

    ``scale`` optionally multiplies each edge's residual (e.g. ``1 / rest length``).
    """
    p, q = edges[:, 0], edges[:, 1]
    a = np.einsum("eij,ej->ei", R[p], rest_nodes[q] - rest_nodes[p])
    e = a + v[p] - v[q]
    E = len(edges)
    rows = np.arange(3 * E).reshape(E, 3)
    # d e / d omega_p = -[a]x, d e / d tau_p = I, d e / d tau_q = -I
    S = -skew(a)
    r_rot = np.broadcast_to(rows[:, :, None], (E, 3, 3))
    c_rot = np.broadcast_to((p[:, None] * 6 + np.arange(3))[:, None, :], (E, 3, 3))
    c_tp = p[:, None] * 6 + 3 + np.arange(3)
    c_tq = q[:, None] * 6 + 3 + np.arange(3)
    data = np.concatenate([S.ravel(), np.ones(3 * E), -np.ones(3 * E)])
    r = np.concatenate([r_rot.ravel(), rows.ravel(), rows.ravel()])
    c = np.concatenate([c_rot.ravel(), c_tp.ravel(), c_tq.ravel()])
    J = sp.csr_matrix((data, (r, c)), shape=(3 * E, 6 * len(v)))
    if scale is not None:
        s = np.repeat(np.asarray(scale, dtype=np.float64), 3)
        return e.ravel() * s, sp.diags(s) @ J
    return e.ravel(), J


def reg_energy(R, v, rest_nodes, edges, scale=None):
    p, q = edges[:, 0], edges[:, 1]
    e = np.einsum("eij,ej->ei", R[p], rest_nodes[q] - rest_nodes[p]) + v[p] - v[q]
    if scale is not None:
        e = e * np.asarray(scale, dtype=np.float64)[:, None]
    return float((e * e).sum())


def solve_increment(Jd, rd, wd, Jr, rr, lam, damping=0.0):
    """Minimise ``sum wd (rd + Jd d)^2 + lam |rr + Jr d|^2 + damping-weighted |d|^2``.

    ``damping`` is relative (Levenberg-Marquardt style, scaled by the
    diagonal); a tiny absolute floor keeps unobserved nodes well posed.
    """
    W = sp.diags(wd)
    H = (Jd.T @ W @ Jd + lam * (Jr.T @ Jr)).tocsc()
    g = Jd.T @ (wd * rd) + lam * (Jr.T @ rr)
    diag = H.diagonal()
    floor = 1e-9 * (diag.max() if diag.size and diag.max() > 0 else 1.0)
    H = H + sp.diags(damping * diag + floor)
    n = H.shape[0]
    if H.nnz > DENSE_FILL * n * n:
        # heavily coupled systems factor faster as dense Cholesky
        try:
            return cho_solve(cho_factor(H.toarray()), -g).reshape(-1, 6)
        except np.linalg.LinAlgError:
            pass
    d = spsolve(H.tocsc(), -g)
    return np.asarray(d).reshape(-1, 6)


def apply_increment(R, v, d):
    return rotvec_matrix(d[:, :3]) @ R, v + d[:, 3:]
