"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary lines are also
printed at the end of the session. Running this file directly executes every
criterion in order.
"""

import time

import numpy as np
import pytest

from conftest import check_chaining, filter_case, random_refine_case, random_rotation
from defgraph import io as dio
from defgraph.baseline import chained_nicp
from defgraph.core import axis_angle_matrix, farthest_point_sample, geodesic_distance, knn
from defgraph.evaluation import ate3d, delta_inlier, final_frame_ate
from defgraph.pipeline import PipelineConfig, register_dense, register_sequence
from defgraph.refiner import EnergyWeights, WindowEnergy, check_gradient, refine, rigidity_edges
from defgraph.skinning import rbf_weight
from defgraph.synth import MotionParams, gen_motion, gen_shape
from defgraph.transform import procrustes, rigidity_filter

RESULTS = []
CAMERA = (0.2, 0.3, 1.0)


def report(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_procrustes_oracle():
    rng = np.random.default_rng(0)
    worst, t0 = 0.0, time.perf_counter()
    dets = []
    for i in range(500):
        n = int(rng.integers(4, 40))
        src = rng.normal(size=(n, 3))
        R, t = random_rotation(rng), rng.normal(size=3)
        est = procrustes(src, src @ R.T + t)
        worst = max(worst, np.abs(est.rotation - R).max(), np.abs(est.translation - t).max())
        # a mirrored target has no proper fit, yet the answer must stay a rotation
        mirror = src * [1.0, 1.0, -1.0] @ R.T + t
        dets.append(np.linalg.det(procrustes(src, mirror).rotation))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and np.allclose(dets, 1.0, atol=1e-12) and elapsed < 1.0
    report("procrustes oracle", ok, f"max error {worst:.2e}, min det {min(dets):.12f}, {elapsed:.2f} s for 500")


# (deviations of candidates 1.., frames, compression, admitted nodes incl. centre 0, final threshold)
FILTER_CASES = [
    ([0, 0, 0, 0, 0, 0, 0], 3, False, {0, 1, 2, 3, 4, 5, 6, 7}, 0.2),
    ([0.05, 0.1, 0.15, 0.5, 0.6, 0.7, 0.8], 3, False, {0, 1, 2, 3}, 0.2),
    ([0.05, 0.1, 0.25, 0.5, 0.6, 0.7, 0.8], 3, False, {0, 1, 2, 3}, 0.3),
    ([0.9, 0.85, 0.45, 0.05, 0.35, 0.95, 0.75], 3, False, {0, 3, 4, 5}, 0.5),
    ([0.55, 0.55, 0.55, 0.55], 3, False, {0, 1, 2, 3, 4}, 0.6),
    ([0.15] * 7, 3, False, {0, 1, 2, 3, 4, 5, 6, 7}, 0.2),
    ([0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85], 3, False, {0, 1, 2, 3}, 0.5),
    ([0.05, 0.05, 0.05, 0.25, 0.25, 0.25, 0.25], 3, False, {0, 1, 2, 3}, 0.2),
    ([0.05, 0.05, 0.25, 0.25, 0.25, 0.25, 0.25], 3, False, {0, 1, 2, 3, 4, 5, 6, 7}, 0.3),
    ([1.55, 1.25, 1.15, 1.05, 0.95, 1.35, 1.45], 3, False, {0, 3, 4, 5}, 1.2),
    ([0.95, 0.95, 0.95], 3, False, {0, 1, 2, 3}, 1.0),
    ([0.05, 0.75], 3, False, {0, 1, 2}, 0.8),
    ([0.15, 0.15, 0.15, 0.35, 0.45], 3, True, {0, 1, 2, 3}, 0.2),
    ([0.05, 0.55, 0.05, 0.55, 0.05, 0.55, 0.05, 0.55], 3, False, {0, 1, 3, 5, 7}, 0.2),
    ([0.55, 0.05, 0.55, 0.55, 0.55, 0.55, 0.55, 0.05], 3, False, {0, 1, 2, 3, 4, 5, 6, 7, 8}, 0.6),
    ([0.35, 0.05, 0.45, 0.65, 0.25], 3, False, {0, 1, 2, 5}, 0.4),
    ([0.0, 0.0, 0.0, 0.0, 2.05], 3, False, {0, 1, 2, 3, 4}, 0.2),
    ([0.12, 0.28, 0.31, 0.9, 0.18, 0.33, 0.41], 3, False, {0, 1, 2, 5}, 0.3),
    ([0.45, 0.45, 0.05, 0.45, 0.45], 1, False, {0, 1, 2, 3, 4, 5}, 0.5),
    ([3.05], 3, False, {0, 1}, 3.1),
]


def test_rigidity_filter_trace():
    rng = np.random.default_rng(7)
    bad = []
    for i, (devs, frames, compress, members, eps) in enumerate(FILTER_CASES):
        signs = -np.ones(len(devs)) if compress else None
        rest, traj = filter_case(devs, rng, frames=frames, signs=signs)
        g = rigidity_filter(0, np.arange(len(devs) + 1), rest, traj)
        if set(g.members) != members or abs(g.epsilon_used - eps) > 1e-9:
            bad.append((i, g.members, g.epsilon_used))
    report("rigidity filter trace", not bad, f"{len(FILTER_CASES) - len(bad)}/{len(FILTER_CASES)} cases match"
           + (f", mismatches {bad}" if bad else ""))


def _oracle_fps(pts, count, seed):
    d2 = np.sum((pts[:, None] - pts[None]) ** 2, axis=-1)
    chosen = [seed]
    for _ in range(count - 1):
        mind = d2[:, chosen].min(axis=1)
        mind[chosen] = -1.0
        chosen.append(int(np.argmax(mind)))
    return np.array(chosen)


def _oracle_knn(q, pts, k):
    d2 = np.sum((pts - q) ** 2, axis=1)
    return np.lexsort((np.arange(len(pts)), d2))[:k]


def test_fps_and_knn_oracles():
    rng = np.random.default_rng(3)
    fails = 0
    for i in range(200):
        n = int(rng.integers(1, 257))
        # every other instance sits on a coarse lattice so that distance ties occur
        pts = rng.integers(0, 4, size=(n, 3)).astype(float) if i % 2 else rng.normal(size=(n, 3))
        count = int(rng.integers(1, n + 1))
        seed = int(rng.integers(n))
        ok = np.array_equal(farthest_point_sample(pts, count, seed), _oracle_fps(pts, count, seed))
        for _ in range(3):
            q = rng.integers(0, 4, size=3).astype(float) if i % 2 else rng.normal(size=3)
            k = int(rng.integers(1, n + 1))
            ok &= np.array_equal(knn(q, pts, k), _oracle_knn(q, pts, k))
        fails += not ok
    report("fps and knn oracles", fails == 0, f"{200 - fails}/200 instances match brute force")


def test_rbf_values():
    rng = np.random.default_rng(0)
    errs = []
    for _ in range(100):
        c, r = rng.normal(size=3), rng.uniform(0.01, 2.0)
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        errs.append(abs(rbf_weight(c + r * u, c, r) - np.exp(-0.5)))
        errs.append(abs(rbf_weight(c + 3 * r * u, c, r) - np.exp(-4.5)))
    report("rbf values", max(errs) < 1e-12, f"max error {max(errs):.1e}")


def test_rigid_recovery_end_to_end():
    src = gen_shape("random_blob", 5000, seed=1)
    p = MotionParams(axis=(0.3, 1.0, 0.2), angle=45.0, translation=(0.05, 0.0, 0.02), camera_dir=CAMERA, seed=2)
    targets, gt, _ = gen_motion(src, "rigid", 16, p)
    t0 = time.perf_counter()
    res = register_sequence(src, targets)
    elapsed = time.perf_counter() - t0
    ate, d05 = ate3d(res.warped, gt), delta_inlier(res.warped, gt, 0.05)
    report("rigid recovery", ate < 0.01 and d05 > 0.95 and elapsed < 60.0,
           f"ATE {ate:.4f} (< 0.01), delta_0.05 {d05:.4f} (> 0.95), {elapsed:.1f} s (< 60)")


def test_articulated_recovery():
    src = gen_shape("bar", 5000, seed=1)
    p = MotionParams(hinge_angle=45.0, camera_dir=CAMERA, seed=2)
    targets, gt, _ = gen_motion(src, "articulate", 16, p)
    res = register_sequence(src, targets)
    far = np.abs(src[:, 0] - p.hinge_x) > 0.1
    d05 = delta_inlier(res.warped[:, far], gt[:, far], 0.05)
    # node rotations away from the joint should match their part's rotation
    g = res.graph
    far_nodes = np.abs(g.rest_nodes[:, 0] - p.hinge_x) > 0.1
    moving = g.rest_nodes[:, 0] >= p.hinge_x
    T = gt.shape[0]
    worst = 0.0
    for i in range(T):
        Rh = axis_angle_matrix((0.0, 0.0, 1.0), np.deg2rad(p.hinge_angle) * (i + 1) / T)
        ref = np.where(moving[:, None, None], Rh, np.eye(3))
        worst = max(worst, float(geodesic_distance(g.rotations[i], ref)[far_nodes].max()))
    report("articulated recovery", d05 > 0.9 and worst < 1e-2,
           f"delta_0.05 away from hinge {d05:.4f} (> 0.9), max node rotation error {worst:.4f} rad (< 0.01)")


def test_drift_against_chained_nicp():
    src = gen_shape("random_blob", 5000, seed=4)
    p = MotionParams(axis=(0.3, 1.0, 0.2), angle=90.0, camera_dir=CAMERA, seed=5)
    targets, gt, _ = gen_motion(src, "rigid", 32, p)
    t0 = time.perf_counter()
    ours = register_sequence(src, targets)
    t1 = time.perf_counter()
    rest = ours.graph.rest_nodes
    nicp = chained_nicp(src, targets, rest)
    t2 = time.perf_counter()
    a, b = final_frame_ate(ours.warped, gt), final_frame_ate(nicp.warped, gt)
    report("drift against chained nicp", a < b and t1 - t0 < 300 and t2 - t1 < 300,
           f"final-frame ATE {a:.4f} vs {b:.4f}, {t1 - t0:.0f} s and {t2 - t1:.0f} s (< 300 each)")


def test_sparse_graph_efficiency():
    src = gen_shape("random_blob", 10000, seed=1)
    targets, _, _ = gen_motion(src, "rigid", 2, MotionParams(axis=(0.3, 1.0, 0.2), angle=20.0, seed=1))
    cfg = PipelineConfig(nodes=256)
    graph = float(np.mean(register_sequence(src, targets, cfg).per_frame_seconds))
    dense = float(np.mean(register_dense(src, targets, cfg).per_frame_seconds))
    report("sparse graph efficiency", graph <= dense / 5,
           f"{graph:.2f} s/frame vs dense {dense:.2f} s/frame, ratio 1/{dense / graph:.1f} (<= 1/5)")


def test_refiner_gradient():
    errs = []
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        F, B = 3, 12
        rest = rng.random((B, 3))
        edges, lengths = rigidity_edges(rest)
        coarse = rest + rng.normal(scale=0.02, size=(F, B, 3))
        mu = coarse + rng.normal(scale=0.02, size=coarse.shape)
        n = rng.normal(size=(F, B, 3))
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        nn = n[..., :, None] * n[..., None, :]
        L = nn + np.sqrt(0.1) * (np.eye(3) - nn)
        w = (rng.random((F, B)) > 0.2).astype(float)
        fixed = rest + rng.normal(scale=0.02, size=(2, B, 3))
        problem = WindowEnergy(fixed, coarse, mu, L, w, edges, lengths, EnergyWeights())
        errs.append(check_gradient(problem, coarse + rng.normal(scale=0.02, size=coarse.shape)))
    report("refiner gradient", max(errs) < 1e-4, f"max relative error {max(errs):.2e} over 10 states")


def test_window_chaining():
    bad = []
    for seed in range(50):
        frames, coarse, rest, Tw = random_refine_case(seed)
        out, windows = refine(frames, None, coarse, rest, window=Tw, return_windows=True)
        if not check_chaining(out, windows):
            bad.append(seed)
    report("window chaining", not bad, f"{50 - len(bad)}/50 synthetics bitwise consistent")


def test_bending_trends():
    base = dict(resolution=128)
    errs = {"M1": [], "M6": [], "B64": [], "B256": []}
    for k, angle in enumerate((30.0, 60.0, 90.0)):
        src = gen_shape("bar", 3000, seed=10 + k)
        targets, gt, _ = gen_motion(src, "bend", 8, MotionParams(bend_angle=angle, seed=k))
        for key, cfg in [("M1", dict(iters=1, nodes=256)), ("M6", dict(iters=6, nodes=256)),
                         ("B64", dict(iters=6, nodes=64))]:
            errs[key].append(ate3d(register_sequence(src, targets, PipelineConfig(**cfg, **base)).warped, gt))
    errs["B256"] = errs["M6"]
    med = {k: float(np.median(v)) for k, v in errs.items()}
    report("bending trends", med["M6"] <= med["M1"] and med["B256"] <= med["B64"],
           f"median ATE M=1 {med['M1']:.4f}, M=6 {med['M6']:.4f}; B=64 {med['B64']:.4f}, B=256 {med['B256']:.4f}")


def test_dgsq_fuzz():
    rng = np.random.default_rng(11)
    crashes, structured = [], 0
    for i in range(10000):
        frames = [rng.normal(size=(int(rng.integers(1, 6)), 3)) for _ in range(int(rng.integers(1, 4)))]
        data = bytearray(dio.encode_seq(frames))
        for _ in range(int(rng.integers(1, 5))):
            op = rng.integers(4)
            if op == 0 and data:
                data[rng.integers(len(data))] = rng.integers(256)
            elif op == 1 and data:
                del data[rng.integers(len(data)):]
            elif op == 2:
                pos = int(rng.integers(len(data) + 1))
                data[pos:pos] = rng.bytes(int(rng.integers(1, 9)))
            elif data:
                # flip a bit in the header, where the reader has the most to check
                j = int(rng.integers(min(len(data), 16)))
                data[j] ^= 1 << int(rng.integers(8))
        try:
            dio.decode_seq(bytes(data))
        except dio.FormatError:
            structured += 1
        except Exception as exc:  # anything else is a crash
            crashes.append((i, type(exc).__name__))
    report("dgsq fuzz", not crashes, f"10000 mutations, {structured} structured errors, {len(crashes)} crashes")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
