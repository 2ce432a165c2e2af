"""End-to-end registration: encode, match, refine, radii, transforms, skin."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from .core import (DeformationGraph, InvalidArgument, Normalization, RegistrationResult, as_cloud,
                   as_sequence, farthest_point_sample)
from .matcher import SourceModel, TargetFrame, match_sequence
from .refiner import EnergyWeights, estimate_radii, refine
from .skinning import K_INIT, register
from .transform import estimate_transforms
from .triplane import encode, sample_points


@dataclass
class PipelineConfig:
    nodes: int = 256
    window: int = 8
    iters: int = 6
    k_skin: int = 4
    k_init: int = K_INIT
    resolution: int = 256
    lambda_node: float = 1.0
    lambda_rigid: float = 0.1
    alpha: float = 0.8
    seed: int = 0
    threads: int = 1

    def validate(self):
        if self.nodes < 4:
            raise InvalidArgument(f"--nodes must be >= 4, got {self.nodes}")
        if self.window < 2 or self.window % 2:
            raise InvalidArgument(f"--window must be even and >= 2, got {self.window}")
        if self.iters < 1:
            raise InvalidArgument("--iters must be >= 1")
        if self.k_skin < 1 or self.k_init < self.k_skin:
            raise InvalidArgument("need 1 <= k_skin <= k_init")
        if self.resolution < 2:
            raise InvalidArgument("--resolution must be >= 2")
        if self.threads < 1:
            raise InvalidArgument("--threads must be >= 1")
        self.weights()
        return self

    def weights(self):
        return EnergyWeights(self.lambda_node, self.lambda_rigid, self.alpha)

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, value in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise InvalidArgument(f"unknown setting {key!r}")
            out[key] = float(value) if known[key] == "float" else int(value)
        return cls(**out)

    def as_dict(self):
        return asdict(self)


def _map(fn, items, threads):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def prepare(source, seq, config: PipelineConfig):
    """Normalise, encode every cloud and pick the rest nodes."""
    src = as_cloud(source, "source")
    frames = as_sequence(seq)
    if config.nodes > src.shape[0]:
        raise InvalidArgument(f"--nodes {config.nodes} exceeds the {src.shape[0]} source points")
    norm = Normalization.from_points(src)
    src_n = norm.forward(src)
    sdesc, sgrid = encode(src_n, config.resolution)

    def enc(c):
        c = norm.forward(c)
        desc, grid = encode(c, config.resolution)
        return TargetFrame(c, grid, desc)

    targets = _map(enc, frames, config.threads)
    start = int(np.random.default_rng(config.seed).integers(src.shape[0]))
    return norm, src_n, sdesc, sgrid, targets, start


def _world_graph(graph: DeformationGraph, norm: Normalization):
    s, c = norm.scale, norm.center
    out = DeformationGraph(norm.inverse(graph.rest_nodes), graph.radii * s, norm.inverse(graph.node_traj),
                           graph.node_index, diagnostics=graph.diagnostics)
    if graph.rotations is not None:
        out.rotations = graph.rotations
        # x' = R x + t in the unit frame becomes x' = R x + (s t + c - R c) in world units
        out.translations = s * graph.translations + c - np.einsum("tbij,j->tbi", graph.rotations, c)
    return out


def register_sequence(source, seq, config: PipelineConfig | None = None) -> RegistrationResult:
    """Warp ``source`` into every frame of ``seq`` through a sparse deformation graph."""
    config = (config or PipelineConfig()).validate()
    timings = {}
    t0 = time.perf_counter()
    norm, src_n, sdesc, sgrid, targets, start = prepare(source, seq, config)
    t1 = time.perf_counter()
    timings["encode"] = t1 - t0

    idx = farthest_point_sample(src_n, config.nodes, start)
    rest = src_n[idx]
    feat = sample_points(sgrid, rest)
    model = SourceModel(src_n, sdesc[:, 2:5], rest)
    coarse = match_sequence(rest, feat, targets, config.iters, threads=config.threads, model=model)
    t2 = time.perf_counter()
    timings["match"] = t2 - t1

    traj = refine(targets, None, coarse, rest, config.weights(), config.iters, config.window)
    t3 = time.perf_counter()
    timings["refine"] = t3 - t2

    graph = DeformationGraph(rest, estimate_radii(traj, rest), traj, idx)
    estimate_transforms(graph)
    t4 = time.perf_counter()
    timings["transforms"] = t4 - t3

    res = register(src_n, graph, config.k_init, config.k_skin)
    t5 = time.perf_counter()
    timings["skin"] = t5 - t4

    T = len(targets)
    per_frame = np.full(T, (t5 - t0) / T)
    diagnostics = {"timings": timings, "coarse_nodes": norm.inverse(coarse)}
    return RegistrationResult(norm.inverse(res.warped), per_frame, _world_graph(graph, norm), diagnostics)


def register_dense(source, seq, config: PipelineConfig | None = None) -> RegistrationResult:
    """Per-point path: every source point is matched and refined as its own node.

    No graph and no skinning; used to measure what the sparse graph saves.
    """
    config = (config or PipelineConfig()).validate()
    t0 = time.perf_counter()
    norm, src_n, sdesc, sgrid, targets, _ = prepare(source, seq, config)
    feat = sample_points(sgrid, src_n)
    model = SourceModel(src_n, sdesc[:, 2:5], src_n)
    coarse = match_sequence(src_n, feat, targets, config.iters, threads=config.threads, model=model)
    traj = refine(targets, None, coarse, src_n, config.weights(), config.iters, config.window)
    T = len(targets)
    per_frame = np.full(T, (time.perf_counter() - t0) / T)
    return RegistrationResult(norm.inverse(traj), per_frame, None, {"dense": True})
