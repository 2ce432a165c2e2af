import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defgraph.core import InvalidArgument, axis_angle_matrix
from defgraph.synth import (BLEND_BAND, MOTIONS, SHAPES, MotionParams, depth_sample, depth_sample_indices,
                            gen_motion, gen_shape)


def test_sphere_radius():
    pts = gen_shape("sphere", 1000, seed=3)
    assert np.allclose(np.linalg.norm(pts, axis=1), 0.5, atol=1e-9)


def test_bar_extents():
    pts = gen_shape("bar", 2000, seed=0)
    ext = pts.max(0) - pts.min(0)
    assert np.allclose(ext, [1.0, 0.2, 0.2], atol=0.02)
    # every point lies on a face of the box
    on_face = np.isclose(np.abs(pts), [0.5, 0.1, 0.1], atol=1e-12).any(axis=1)
    assert on_face.all()


@pytest.mark.parametrize("kind", SHAPES)
def test_shapes_deterministic_and_unit(kind):
    a = gen_shape(kind, 500, seed=7)
    assert np.array_equal(a, gen_shape(kind, 500, seed=7))
    assert (a.max(0) - a.min(0)).max() <= 1.0 + 1e-12
    assert np.abs(a).max() <= 0.5 + 1e-12


def test_bad_shape_and_motion():
    with pytest.raises(InvalidArgument):
        gen_shape("torus", 100)
    with pytest.raises(InvalidArgument):
        gen_shape("sphere", 8)
    pts = gen_shape("sphere", 100)
    with pytest.raises(InvalidArgument):
        gen_motion(pts, "twist", 4)
    with pytest.raises(InvalidArgument):
        gen_motion(pts, "rigid", 1)


def test_zero_rigid_motion_is_static():
    pts = gen_shape("random_blob", 300)
    targets, gt, _ = gen_motion(pts, "rigid", 4, MotionParams(angle=0.0))
    assert all(np.array_equal(t, pts) for t in targets)
    assert np.array_equal(gt, np.stack([pts] * 4))


def test_bend_fixes_axis_plane():
    pts = gen_shape("bar", 2000)
    pts[:10, 0] = 0.0
    _, gt, _ = gen_motion(pts, "bend", 5)
    assert np.allclose(gt[:, :10], pts[:10], atol=1e-15)


def test_articulate_final_frame_hinge():
    pts = gen_shape("bar", 2000)
    _, gt, labels = gen_motion(pts, "articulate", 6, MotionParams(hinge_angle=45.0))
    R = axis_angle_matrix((0, 0, 1), np.deg2rad(45.0))
    out = labels.astype(bool) & (pts[:, 0] > BLEND_BAND / 2)
    assert np.allclose(gt[-1, out], pts[out] @ R.T, atol=1e-12)
    rest_side = ~labels.astype(bool) & (pts[:, 0] < -BLEND_BAND / 2)
    assert np.array_equal(gt[-1, rest_side], pts[rest_side])


@pytest.mark.parametrize("kind", MOTIONS)
def test_motion_reproducible(kind):
    pts = gen_shape("bar", 400, seed=1)
    p = MotionParams(noise_sigma=0.01, subsample=200, seed=5)
    a = gen_motion(pts, kind, 3, p)
    b = gen_motion(pts, kind, 3, p)
    assert all(np.array_equal(x, y) for x, y in zip(a[0], b[0]))
    assert np.array_equal(a[1], b[1]) and np.array_equal(a[2], b[2])


def test_noise_only_on_targets():
    pts = gen_shape("sphere", 300)
    targets, gt, _ = gen_motion(pts, "rigid", 3, MotionParams(noise_sigma=0.02))
    _, clean, _ = gen_motion(pts, "rigid", 3, MotionParams())
    assert np.array_equal(gt, clean)
    diff = np.abs(np.stack(targets) - gt)
    assert 0 < diff.max() <= 0.02


@given(st.sampled_from(["rigid", "articulate"]), st.integers(0, 1000))
@settings(max_examples=20)
def test_isometric_parts_preserve_distances(kind, seed):
    pts = gen_shape("bar", 300, seed=seed)
    p = MotionParams(axis=(1.0, 2.0, 0.5), angle=70.0, translation=(0.1, 0, 0), hinge_angle=60.0)
    _, gt, labels = gen_motion(pts, kind, 3, p)
    band = np.abs(pts[:, 0] - p.hinge_x) <= BLEND_BAND / 2
    for part in (0, 1):
        sel = (labels == part) & ~band if kind == "articulate" else np.ones(len(pts), bool)
        d0 = np.linalg.norm(pts[sel][:, None] - pts[sel][None], axis=-1)
        for f in range(3):
            df = np.linalg.norm(gt[f, sel][:, None] - gt[f, sel][None], axis=-1)
            assert np.abs(df - d0).max() < 1e-9


def test_depth_sample_sphere_half():
    pts = gen_shape("sphere", 5000, seed=0)
    idx = depth_sample_indices(pts, (0, 0, 1))
    assert 0.4 <= len(idx) / len(pts) <= 0.6
    # what survives is the hemisphere facing the camera
    assert np.mean(pts[idx, 2] > 0) > 0.95


def test_depth_sample_plane_one_per_pixel():
    g = np.linspace(-0.5, 0.5, 40)
    X, Y = np.meshgrid(g, g)
    plane = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], 1)
    plane = np.vstack([plane, plane[:50]])  # duplicates share a pixel
    idx = depth_sample_indices(plane, (0, 0, 1), resolution=128)
    assert len(idx) == 1600


@given(st.integers(0, 10**6))
@settings(max_examples=20)
def test_depth_sample_subset(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(300, 3))
    cam = rng.normal(size=3)
    out = depth_sample(pts, cam, 32)
    assert set(map(tuple, out)) <= set(map(tuple, pts))
    with pytest.raises(InvalidArgument):
        depth_sample(pts, cam, 8)
