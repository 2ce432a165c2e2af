import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation(rng):
    from defgraph.core import rotvec_matrix
    w = rng.normal(size=3)
    w *= rng.uniform(0.0, np.pi) / np.linalg.norm(w)
    return rotvec_matrix(w)


def brute_fps(pts, count, seed=0):
    """Quadratic farthest point sampling: recompute all min-distances each round."""
    chosen = [seed]
    for _ in range(count - 1):
        best, best_d = -1, -1.0
        for i in range(len(pts)):
            if i in chosen:
                continue
            d = min(float(np.sum((pts[i] - pts[j]) ** 2)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return np.array(chosen)


def brute_knn(query, pts, k):
    d = np.array([float(np.sum((p - query) ** 2)) for p in pts])
    return np.lexsort((np.arange(len(pts)), d))[:k]


def filter_case(devs, rng, frames=3, signs=None):
    """Centre node 0 plus one candidate per entry of ``devs`` whose distance to the
    centre deviates from rest by exactly that fraction in its worst frame.

    Returns ``(rest, traj)``; candidate ``k`` is node ``k + 1`` and candidates are
    ordered nearest first at rest.
    """
    K = len(devs)
    dirs = rng.normal(size=(K, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dist = 0.1 + 0.01 * np.arange(K)
    rest = np.vstack([np.zeros(3), dirs * dist[:, None]])
    traj = np.empty((frames, K + 1, 3))
    for f in range(frames):
        # the last frame carries the full deviation, earlier frames a fraction of it
        frac = (f + 1) / frames
        sgn = np.ones(K) if signs is None else np.asarray(signs, dtype=float)
        scale = 1.0 + sgn * np.asarray(devs, dtype=float) * frac
        local = np.vstack([np.zeros(3), dirs * (dist * scale)[:, None]])
        Rf = random_rotation(rng)
        traj[f] = local @ Rf.T + rng.normal(size=3)
    return rest, traj


def random_refine_case(seed, B=16, n=300):
    """Small random sequence for refinement: frames, coarse nodes, rest nodes, window length."""
    from defgraph.matcher import TargetFrame
    from defgraph.synth import SHAPES, MOTIONS, MotionParams, gen_motion, gen_shape
    from defgraph.triplane import encode
    rng = np.random.default_rng(seed)
    src = gen_shape(SHAPES[rng.integers(len(SHAPES))], n, seed=seed)
    T = int(rng.integers(2, 21))
    Tw = int(rng.choice([2, 4, 6, 8]))
    kind = MOTIONS[rng.integers(len(MOTIONS))]
    p = MotionParams(axis=tuple(rng.normal(size=3)), angle=float(rng.uniform(0, 90)), seed=seed,
                     noise_sigma=float(rng.uniform(0, 0.01)))
    targets, gt, _ = gen_motion(src, kind, T, p)
    idx = rng.choice(n, B, replace=False)
    frames = [TargetFrame(c, g, d) for c in targets for d, g in [encode(c, 32)]]
    coarse = gt[:, idx] + rng.normal(scale=0.01, size=(T, B, 3))
    return frames, coarse, src[idx], Tw


def check_chaining(out, windows):
    """Every frozen frame equals the value its solving window produced, bitwise."""
    solved = {}
    for w in windows:
        for j in range(w.length):
            f = w.start + j
            if j < w.frozen:
                if not np.array_equal(w.node_pos[j], solved[f]):
                    return False
            else:
                solved[f] = w.node_pos[j]
    return all(np.array_equal(out[f], v) for f, v in solved.items()) and len(solved) == len(out)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
