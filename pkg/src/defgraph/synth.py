"""Synthetic shapes and motions with analytic ground-truth trajectories.

Frame ``i`` (0-based) of a ``T``-frame motion sits at phase ``(i + 1) / T``:
the last frame carries the full motion and no frame equals the rest pose
unless the motion itself is zero there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .core import InvalidArgument, Normalization, as_cloud, axis_angle_matrix, rotvec_matrix

SHAPES = ("sphere", "bar", "two_spheres", "random_blob")
MOTIONS = ("rigid", "bend", "sine", "articulate", "separate")
BLEND_BAND = 0.05


def _sphere_dirs(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _box_surface(rng, n, extents):
    ex = np.asarray(extents, dtype=np.float64)
    areas = np.array([ex[1] * ex[2], ex[1] * ex[2], ex[0] * ex[2], ex[0] * ex[2], ex[0] * ex[1], ex[0] * ex[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = (rng.random((n, 3)) - 0.5) * ex
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    pts[np.arange(n), axis] = sign * ex[axis]
    return pts


def gen_shape(kind, n, seed=0):
    """Deterministic surface samples of a shape fitting the unit cube centred at the origin."""
    if kind not in SHAPES:
        raise InvalidArgument(f"unknown shape {kind!r}; expected one of {SHAPES}")
    n = int(n)
    if n < 16:
        raise InvalidArgument("need at least 16 points")
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        return 0.5 * _sphere_dirs(rng, n)
    if kind == "bar":
        return _box_surface(rng, n, (1.0, 0.2, 0.2))
    if kind == "two_spheres":
        side = rng.random(n) < 0.5
        pts = 0.25 * _sphere_dirs(rng, n)
        pts[:, 0] += np.where(side, -0.25, 0.25)
        return pts
    # random_blob: star-shaped surface with a few smooth radial bumps
    dirs = _sphere_dirs(rng, n)
    bump_dirs = _sphere_dirs(rng, 5)
    amps = rng.uniform(0.15, 0.35, size=5)
    radius = 1.0 + np.sum(amps * np.exp(-4.0 * (1.0 - dirs @ bump_dirs.T)), axis=1)
    pts = dirs * radius[:, None] * np.array([1.4, 1.0, 0.8])
    norm = Normalization.from_points(pts)
    return norm.forward(pts)


@dataclass
class MotionParams:
    """Parameters for :func:`gen_motion`; unused fields are ignored per kind.

    Angles are in degrees. ``spin_*`` adds a global rigid rotation on top of
    any kind (the rigid kind uses ``axis``/``angle`` instead).
    """

    axis: tuple = (0.0, 0.0, 1.0)
    angle: float = 45.0
    translation: tuple = (0.0, 0.0, 0.0)
    bend_angle: float = 60.0
    amplitude: float = 0.05
    frequency: float = 1.0
    phase_scale: float = 1.0
    hinge_x: float = 0.0
    hinge_angle: float = 45.0
    separation: float = 0.3
    spin_axis: tuple = (0.0, 1.0, 0.0)
    spin_angle: float = 0.0
    noise_sigma: float = 0.0
    subsample: int | None = None
    camera_dir: tuple | None = None
    depth_resolution: int = 128
    seed: int = 0
    extra: dict = field(default_factory=dict)


def _rotate_about(points, axis, angles, pivot):
    """Rotate each point about ``axis`` through ``pivot`` by its own angle (radians)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    R = rotvec_matrix(angles[:, None] * axis)
    return np.einsum("nij,nj->ni", R, points - pivot) + pivot


def smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def part_labels(shape, kind, params: MotionParams):
    x = shape[:, 0]
    return (x >= params.hinge_x).astype(np.int64) if kind in ("articulate", "separate") else np.zeros(len(x), np.int64)


def motion_frame(shape, kind, frac, params: MotionParams):
    """Ground-truth positions of ``shape`` at motion phase ``frac`` in [0, 1]."""
    pts = np.asarray(shape, dtype=np.float64)
    n = pts.shape[0]
    if kind == "rigid":
        R = axis_angle_matrix(params.axis, np.deg2rad(params.angle) * frac)
        out = pts @ R.T + frac * np.asarray(params.translation, dtype=np.float64)
        return out
    if kind == "bend":
        theta = np.deg2rad(params.bend_angle) * frac * pts[:, 0] / 0.5
        out = _rotate_about(pts, (0.0, 0.0, 1.0), theta, np.zeros(3))
    elif kind == "sine":
        disp = params.amplitude * np.sin(2.0 * np.pi * (params.frequency * frac + params.phase_scale * pts[:, 0]))
        out = pts.copy()
        out[:, 1] += disp
    elif kind == "articulate":
        s = smoothstep((pts[:, 0] - params.hinge_x) / BLEND_BAND + 0.5)
        theta = np.deg2rad(params.hinge_angle) * frac * s
        out = _rotate_about(pts, (0.0, 0.0, 1.0), theta, np.array([params.hinge_x, 0.0, 0.0]))
    elif kind == "separate":
        side = np.where(pts[:, 0] >= params.hinge_x, 1.0, -1.0)
        out = pts.copy()
        out[:, 0] += side * 0.5 * params.separation * frac
    else:
        raise InvalidArgument(f"unknown motion {kind!r}; expected one of {MOTIONS}")
    if params.spin_angle:
        R = axis_angle_matrix(params.spin_axis, np.deg2rad(params.spin_angle) * frac)
        out = out @ R.T
    t = np.asarray(params.translation, dtype=np.float64)
    if t.any():
        out = out + frac * t
    assert out.shape == (n, 3)
    return out


def gen_motion(shape, kind, frames, params: MotionParams | None = None):
    """Return ``(targets, gt, labels)``.

    ``gt`` is ``(T, N, 3)``: every source point's true position per frame.
    ``targets`` are the observed clouds: the ground truth, optionally depth
    sampled from ``camera_dir``, randomly subsampled and jittered with uniform
    noise in ``[-noise_sigma, noise_sigma]`` (targets only).
    """
    params = params or MotionParams()
    if kind not in MOTIONS:
        raise InvalidArgument(f"unknown motion {kind!r}; expected one of {MOTIONS}")
    frames = int(frames)
    if frames < 2:
        raise InvalidArgument("need at least 2 frames")
    if params.noise_sigma < 0 or params.depth_resolution < 16:
        raise InvalidArgument("invalid noise or depth parameters")
    src = as_cloud(shape, "shape")
    rng = np.random.default_rng(params.seed)
    gt = np.stack([motion_frame(src, kind, (i + 1) / frames, params) for i in range(frames)])
    targets = []
    for i in range(frames):
        cloud = gt[i]
        if params.camera_dir is not None:
            cloud = cloud[depth_sample_indices(cloud, params.camera_dir, params.depth_resolution)]
        if params.subsample is not None and params.subsample < cloud.shape[0]:
            cloud = cloud[np.sort(rng.choice(cloud.shape[0], params.subsample, replace=False))]
        if params.noise_sigma > 0:
            cloud = cloud + rng.uniform(-params.noise_sigma, params.noise_sigma, size=cloud.shape)
        targets.append(np.ascontiguousarray(cloud))
    return targets, gt, part_labels(src, kind, params)


def _camera_basis(camera_dir):
    d = np.asarray(camera_dir, dtype=np.float64)
    d = d / np.linalg.norm(d)
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    return d, u, np.cross(d, u)


def hidden_point_removal(cloud, camera_dir, distance=30.0, gamma=2.0):
    """Indices of points visible from far along ``camera_dir`` (spherical flip + convex hull)."""
    pts = as_cloud(cloud)
    d, _, _ = _camera_basis(camera_dir)
    extent = float((pts.max(axis=0) - pts.min(axis=0)).max()) or 1.0
    rel = pts - (pts.mean(axis=0) + distance * extent * d)
    norms = np.linalg.norm(rel, axis=1, keepdims=True)
    radius = norms.max() * 10.0**gamma
    flipped = rel + 2.0 * (radius - norms) * rel / norms
    if pts.shape[0] < 4:
        return np.arange(pts.shape[0])
    try:
        hull = ConvexHull(np.vstack([flipped, np.zeros(3)]))
    except QhullError:  # flat or tiny inputs: everything faces the camera
        return np.arange(pts.shape[0])
    v = hull.vertices
    return np.sort(v[v < pts.shape[0]])


def depth_sample_indices(cloud, camera_dir, resolution=128):
    """Indices of the points an orthographic depth camera from ``camera_dir`` keeps.

    Occluded points are dropped first (hidden point removal from a distant
    viewpoint), then the survivors go through a ``resolution``-square z-buffer
    over the projected extent, which keeps the front-most point of each pixel
    (ties to the lowest index).
    """
    pts = as_cloud(cloud)
    resolution = int(resolution)
    if resolution < 16:
        raise InvalidArgument("resolution must be >= 16")
    d, u, v = _camera_basis(camera_dir)
    depth = pts @ d
    uv = np.stack([pts @ u, pts @ v], axis=1)
    lo = uv.min(axis=0)
    side = float((uv.max(axis=0) - lo).max())
    pix = side / resolution if side > 0 else 1.0
    ij = np.minimum(np.floor((uv - lo) / pix).astype(np.int64), resolution - 1)
    flat = ij[:, 0] * resolution + ij[:, 1]
    cand = hidden_point_removal(pts, d)
    order = np.lexsort((cand, -depth[cand], flat[cand]))
    cand = cand[order]
    first = np.ones(cand.shape[0], dtype=bool)
    first[1:] = flat[cand][1:] != flat[cand][:-1]
    return np.sort(cand[first])


def depth_sample(cloud, camera_dir, resolution=128):
    pts = as_cloud(cloud)
    return pts[depth_sample_indices(pts, camera_dir, resolution)]


def random_camera(rng):
    d = rng.normal(size=3)
    return d / np.linalg.norm(d)
