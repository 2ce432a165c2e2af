import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import brute_fps, brute_knn, random_rotation
from defgraph.core import (DeformationGraph, InvalidArgument, Normalization, Se3, SpatialGrid,
                           axis_angle_matrix, farthest_point_sample, geodesic_distance, is_rotation,
                           knn, neighbor_graph, rotvec_matrix, se3_apply)

coords = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False, width=32)


def clouds(min_n=1, max_n=64):
    return st.integers(min_n, max_n).flatmap(lambda n: arrays(np.float64, (n, 3), elements=coords))


def lattice_clouds(min_n=2, max_n=48):
    # small integer lattice: lots of exact distance ties and duplicates
    return st.integers(min_n, max_n).flatmap(
        lambda n: arrays(np.float64, (n, 3), elements=st.integers(-2, 2).map(float)))


def test_fps_colinear():
    pts = np.zeros((10, 3))
    pts[:, 0] = np.arange(10)
    assert list(farthest_point_sample(pts, 2)) == [0, 9]


def test_fps_small_random_matches_oracle(rng):
    pts = rng.random((8, 3))
    assert np.array_equal(farthest_point_sample(pts, 4), brute_fps(pts, 4))


@given(clouds(2, 40), st.data())
@settings(max_examples=100)
def test_fps_matches_oracle(pts, data):
    count = data.draw(st.integers(1, len(pts)))
    seed = data.draw(st.integers(0, len(pts) - 1))
    assert np.array_equal(farthest_point_sample(pts, count, seed), brute_fps(pts, count, seed))


@given(lattice_clouds(), st.data())
@settings(max_examples=60)
def test_fps_ties_match_oracle(pts, data):
    count = data.draw(st.integers(1, len(pts)))
    assert np.array_equal(farthest_point_sample(pts, count), brute_fps(pts, count))


@given(clouds(3, 64))
@settings(max_examples=50)
def test_fps_radius_non_increasing(pts):
    idx = farthest_point_sample(pts, len(pts))
    radii = []
    for c in range(2, len(pts) + 1):
        sel = pts[idx[:c]]
        d = np.linalg.norm(sel[:, None] - sel[None], axis=-1)
        radii.append(d[np.triu_indices(c, 1)].min())
    assert all(b <= a for a, b in zip(radii, radii[1:]))


def test_fps_bad_count():
    with pytest.raises(InvalidArgument):
        farthest_point_sample(np.zeros((3, 3)), 4)


def test_knn_examples():
    pts = np.array([[1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
    assert list(knn(np.zeros(3), pts, 2)) == [0, 1]
    assert list(knn(pts[2], pts, 1)) == [2]
    with pytest.raises(InvalidArgument):
        knn(np.zeros(3), pts, 4)


def test_knn_64_points(rng):
    pts = rng.random((64, 3))
    for q in rng.random((10, 3)):
        assert np.array_equal(knn(q, pts, 8), brute_knn(q, pts, 8))


@given(clouds(1, 64), arrays(np.float64, 3, elements=coords), st.data())
@settings(max_examples=100)
def test_knn_matches_oracle(pts, q, data):
    k = data.draw(st.integers(1, len(pts)))
    assert np.array_equal(knn(q, pts, k), brute_knn(q, pts, k))


@given(lattice_clouds(), st.data())
@settings(max_examples=80)
def test_knn_ties_match_oracle(pts, data):
    k = data.draw(st.integers(1, len(pts)))
    q = np.array(data.draw(st.tuples(*[st.integers(-2, 2)] * 3)), dtype=float)
    assert np.array_equal(knn(q, pts, k), brute_knn(q, pts, k))


@given(clouds(2, 48), st.randoms(use_true_random=False))
@settings(max_examples=60)
def test_knn_permutation_invariant(pts, r):
    perm = np.array(r.sample(range(len(pts)), len(pts)))
    q = np.zeros(3)
    k = len(pts) // 2 + 1
    direct = knn(q, pts, k)
    # map permuted results back to original indices, then reapply the tie rule
    back = perm[knn(q, pts[perm], k)]
    d = np.sum((pts - q) ** 2, axis=1)
    assert np.array_equal(np.sort(d[direct]), np.sort(d[back]))
    ranked = back[np.lexsort((back, d[back]))]
    kth = d[direct[-1]]
    assert np.array_equal(ranked[d[ranked] < kth], direct[d[direct] < kth])


def test_spatial_grid_many_queries(rng):
    pts = rng.normal(size=(300, 3)) * [1.0, 0.1, 0.01]
    q = rng.normal(size=(40, 3))
    idx, d2 = SpatialGrid(pts).query(q, 5)
    for i in range(len(q)):
        assert np.array_equal(idx[i], brute_knn(q[i], pts, 5))
    assert np.all(np.diff(d2, axis=1) >= 0)


def test_neighbor_graph_excludes_self(rng):
    nodes = rng.random((20, 3))
    nb = neighbor_graph(nodes, 4)
    assert nb.shape == (20, 4)
    assert not np.any(nb == np.arange(20)[:, None])


def test_se3_examples():
    p = np.array([0.3, -1.2, 2.0])
    assert np.array_equal(se3_apply(Se3.identity(), p), p)
    rz = Se3(axis_angle_matrix((0, 0, 1), np.pi / 2), np.zeros(3))
    assert np.allclose(se3_apply(rz, [1.0, 0, 0]), [0.0, 1.0, 0.0], atol=1e-15)


def test_se3_compose_and_inverse(rng):
    for _ in range(20):
        a = Se3(random_rotation(rng), rng.normal(size=3))
        b = Se3(random_rotation(rng), rng.normal(size=3))
        p = rng.normal(size=3)
        assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-12)
        assert np.allclose(a.inverse().apply(a.apply(p)), p, atol=1e-12)
        assert np.allclose(a.matrix() @ np.append(p, 1.0), np.append(a.apply(p), 1.0))


def test_se3_rejects_reflection():
    with pytest.raises(InvalidArgument):
        Se3(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


@given(arrays(np.float64, 3, elements=st.floats(-10, 10)))
def test_rotvec_is_rotation(w):
    assert is_rotation(rotvec_matrix(w))


@given(arrays(np.float64, 3, elements=st.floats(-1, 1)), st.floats(-6, 6))
def test_axis_angle_is_rotation(axis, angle):
    R = axis_angle_matrix(axis, angle)
    assert is_rotation(R)


def test_geodesic_distance():
    R = axis_angle_matrix((1, 1, 0), 0.7)
    assert geodesic_distance(np.eye(3), R) == pytest.approx(0.7, abs=1e-7)
    assert geodesic_distance(R, R) == pytest.approx(0.0, abs=1e-7)


def test_normalization_round_trip(rng):
    pts = rng.normal(size=(50, 3)) * 7 + 3
    n = Normalization.from_points(pts)
    u = n.forward(pts)
    assert (u.max(axis=0) - u.min(axis=0)).max() == pytest.approx(1.0)
    assert np.allclose((u.max(axis=0) + u.min(axis=0)) / 2, 0.0, atol=1e-12)
    assert np.allclose(n.inverse(u), pts)


def test_graph_needs_four_nodes():
    with pytest.raises(InvalidArgument):
        DeformationGraph(np.zeros((3, 3)), np.ones(3), np.zeros((1, 3, 3)))
    g = DeformationGraph(np.eye(4, 3), np.ones(4), np.eye(4, 3)[None])
    assert g.num_nodes == 4 and g.num_frames == 1
