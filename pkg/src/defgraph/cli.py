"""Command-line interface.

Exit codes: 0 success, 2 invalid arguments, 3 file or format errors,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io as dio
from . import synth
from .core import DefGraphError, DegenerateGeometry, InvalidArgument, NumericalFailure, farthest_point_sample
from .evaluation import compare, evaluate
from .pipeline import PipelineConfig, register_dense, register_sequence

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

# flag -> (config key, type, help)
PIPELINE_FLAGS = {
    "--nodes": ("nodes", int, "graph nodes B"),
    "--window": ("window", int, "refinement window length T_w (even)"),
    "--iters": ("iters", int, "matching and refinement rounds M"),
    "--k-skin": ("k_skin", int, "nodes blended per point"),
    "--resolution": ("resolution", int, "triplane resolution; descriptors have 8 channels"),
    "--lambda-node": ("lambda_node", float, "weight of the coarse anchor term"),
    "--lambda-rigid": ("lambda_rigid", float, "weight of the local rigidity term"),
    "--seed": ("seed", int, "seed for the node sampling start"),
    "--threads": ("threads", int, "worker threads (fallback: DEFGRAPH_THREADS, then 1)"),
}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _io(fn, *args):
    try:
        return fn(*args)
    except (DefGraphError, OSError) as exc:
        if isinstance(exc, InvalidArgument):
            raise
        raise CliError(EXIT_IO, str(exc)) from None


def _add_pipeline_flags(p):
    defaults = PipelineConfig()
    for flag, (key, typ, text) in PIPELINE_FLAGS.items():
        p.add_argument(flag, type=typ, default=None, metavar=key.upper(),
                       help=f"{text} (default: {getattr(defaults, key)})")
    p.add_argument("--config", default=None, metavar="PATH",
                   help="key=value settings file; flags override it (default: none)")


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    text = _io(Path(path).read_text)
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve_config(args) -> PipelineConfig:
    """Defaults, then the config file, then explicit flags."""
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key, _, _ in PIPELINE_FLAGS.values():
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    if "threads" not in values and os.environ.get("DEFGRAPH_THREADS"):
        values["threads"] = os.environ["DEFGRAPH_THREADS"]
    try:
        return PipelineConfig.from_dict(values).validate()
    except ValueError as exc:
        raise InvalidArgument(str(exc)) from None


def _out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"{out}: {exc.strerror or exc}") from None
    return out


def _timing_report(path, per_frame_seconds, pred=None, gt=None, extra=None):
    d = {"format": dio.REPORT_FORMAT, "ate3d": None, "delta_001": None, "delta_005": None,
         "t_avg": float(np.mean(per_frame_seconds)), "per_frame_ate": []}
    if gt is not None:
        d.update(evaluate(pred, gt, per_frame_seconds).to_dict())
    d["per_frame_seconds"] = [float(s) for s in per_frame_seconds]
    d.update(extra or {})
    _io(Path(path).write_text, json.dumps(d, indent=2))
    return d


def _stack_gt(frames, n):
    if any(f.shape[0] != n for f in frames):
        raise InvalidArgument("ground truth frames must have one point per source point")
    return np.stack(frames)


def cmd_register(args):
    cfg = resolve_config(args)
    source = _io(dio.read_cloud, args.source)
    seq = _io(dio.read_seq, args.sequence)
    gt = _stack_gt(_io(dio.read_seq, args.gt), len(source)) if args.gt else None
    out = _out_dir(args.out)
    res = (register_dense if args.dense else register_sequence)(source, seq, cfg)
    _io(dio.write_seq, out / "warped.dgsq", list(res.warped))
    if res.graph is not None:
        _io(dio.write_trajectories, out / "graph.json", res.graph)
    rep = _timing_report(out / "report.json", res.per_frame_seconds, res.warped, gt,
                         {"config": cfg.as_dict(), "stages": res.diagnostics.get("timings", {})})
    if rep["ate3d"] is not None:
        print(f"ATE_3D {rep['ate3d']:.6f}  delta_0.01 {rep['delta_001']:.4f}  delta_0.05 {rep['delta_005']:.4f}")
    print(f"T_avg {rep['t_avg']:.4f} s/frame; results in {out}")
    return EXIT_OK


def cmd_eval(args):
    pred = _io(dio.read_seq, args.pred)
    gt = _io(dio.read_seq, args.gt)
    if len(pred) != len(gt):
        raise InvalidArgument(f"{len(pred)} predicted frames but {len(gt)} ground-truth frames")
    n = gt[0].shape[0]
    P, G = _stack_gt(pred, n), _stack_gt(gt, n)
    seconds = None
    if args.timing:
        d = _io(dio.read_report_dict, args.timing)
        if d.get("per_frame_seconds"):
            seconds = d["per_frame_seconds"]
        elif d.get("t_avg") is not None:
            seconds = [d["t_avg"]]
    rep = evaluate(P, G, seconds)
    text, table = compare({args.name: rep})
    if args.out:
        out = _out_dir(args.out)
        _io(dio.write_report, out / f"{dio.safe_name(args.name)}.json", rep)
        _io((out / "table.csv").write_text, table)
    print(text)
    return EXIT_OK


def _parse_vec(text):
    try:
        v = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise InvalidArgument(f"expected comma-separated numbers, got {text!r}") from None
    if len(v) != 3:
        raise InvalidArgument(f"expected three components, got {text!r}")
    return v


def cmd_synth(args):
    params = synth.MotionParams(
        axis=_parse_vec(args.axis), angle=args.angle, translation=_parse_vec(args.translation),
        bend_angle=args.bend_angle, hinge_angle=args.hinge_angle, spin_angle=args.spin_angle,
        noise_sigma=args.noise, subsample=args.subsample,
        camera_dir=_parse_vec(args.camera) if args.camera else None, seed=args.seed)
    shape = synth.gen_shape(args.shape, args.points, seed=args.seed)
    targets, gt, labels = synth.gen_motion(shape, args.motion, args.frames, params)
    out = _out_dir(args.out)
    _io(dio.write_cloud, out / "source.ply", shape)
    _io(dio.write_seq, out / "targets.dgsq", targets)
    _io(dio.write_seq, out / "gt.dgsq", list(gt))
    _io((out / "labels.txt").write_text, "\n".join(str(int(x)) for x in labels) + "\n")
    print(f"wrote {args.frames} frames of {args.shape}/{args.motion} to {out}")
    return EXIT_OK


def cmd_baseline(args):
    from .baseline import chained_nicp

    cfg = resolve_config(args)
    source = _io(dio.read_cloud, args.source)
    seq = _io(dio.read_seq, args.sequence)
    gt = _stack_gt(_io(dio.read_seq, args.gt), len(source)) if args.gt else None
    if cfg.nodes > len(source):
        raise InvalidArgument(f"--nodes {cfg.nodes} exceeds the {len(source)} source points")
    out = _out_dir(args.out)
    start = int(np.random.default_rng(cfg.seed).integers(len(source)))
    rest = source[farthest_point_sample(source, cfg.nodes, start)]
    res = chained_nicp(source, seq, rest)
    _io(dio.write_seq, out / "warped.dgsq", list(res.warped))
    rep = _timing_report(out / "report.json", res.per_frame_seconds, res.warped, gt,
                         {"skipped_frames": res.diagnostics["skipped"]})
    if rep["ate3d"] is not None:
        print(f"ATE_3D {rep['ate3d']:.6f}  delta_0.05 {rep['delta_005']:.4f}")
    print(f"T_avg {rep['t_avg']:.4f} s/frame; results in {out}")
    return EXIT_OK


def cmd_bench(args):
    cfg = resolve_config(args)
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = [("points", "mode", "s/frame")]
    for n in sizes:
        shape = synth.gen_shape("random_blob", n, seed=cfg.seed)
        params = synth.MotionParams(axis=(0.3, 1.0, 0.2), angle=20.0, seed=cfg.seed)
        targets, _, _ = synth.gen_motion(shape, "rigid", args.frames, params)
        modes = [("graph", register_sequence)] + ([("dense", register_dense)] if args.dense else [])
        for name, fn in modes:
            t0 = time.perf_counter()
            fn(shape, targets, cfg)
            rows.append((str(n), name, f"{(time.perf_counter() - t0) / args.frames:.3f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    text = "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)
    if args.out:
        out = _out_dir(args.out)
        _io((out / "bench.csv").write_text, "\n".join(",".join(r) for r in rows) + "\n")
    print(text)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="defgraph", description="Sequential non-rigid point cloud registration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="register a source cloud to a DGSQ sequence")
    p.add_argument("source", help="source cloud (.ply or text)")
    p.add_argument("sequence", help="target sequence (.dgsq)")
    _add_pipeline_flags(p)
    p.add_argument("--gt", default=None, help="ground-truth sequence for metrics (default: none)")
    p.add_argument("--dense", action="store_true", help="track every source point instead of a graph (default: off)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="metrics of a predicted sequence against ground truth")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--timing", default=None, help="report file holding per-frame seconds (default: none)")
    p.add_argument("--name", default="method", help="row label (default: method)")
    p.add_argument("--out", default=None, help="directory for report and table files (default: none)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic sequence with ground truth")
    p.add_argument("--shape", default="random_blob", choices=synth.SHAPES, help="shape kind (default: random_blob)")
    p.add_argument("--motion", default="rigid", choices=synth.MOTIONS, help="motion kind (default: rigid)")
    p.add_argument("--frames", type=int, default=16, help="frame count (default: 16)")
    p.add_argument("--points", type=int, default=5000, help="source points (default: 5000)")
    p.add_argument("--axis", default="0,0,1", help="rigid rotation axis (default: 0,0,1)")
    p.add_argument("--angle", type=float, default=45.0, help="rigid rotation in degrees (default: 45)")
    p.add_argument("--translation", default="0,0,0", help="final translation (default: 0,0,0)")
    p.add_argument("--bend-angle", type=float, default=60.0, help="bend angle in degrees (default: 60)")
    p.add_argument("--hinge-angle", type=float, default=45.0, help="hinge angle in degrees (default: 45)")
    p.add_argument("--spin-angle", type=float, default=0.0, help="extra global spin in degrees (default: 0)")
    p.add_argument("--noise", type=float, default=0.0, help="uniform target noise (default: 0)")
    p.add_argument("--subsample", type=int, default=None, help="target points kept (default: all)")
    p.add_argument("--camera", default=None, help="depth-sample from this direction, e.g. 0,0,1 (default: off)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("baseline", help="chained non-rigid ICP")
    p.add_argument("source")
    p.add_argument("sequence")
    _add_pipeline_flags(p)
    p.add_argument("--gt", default=None, help="ground-truth sequence for metrics (default: none)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("bench", help="per-frame time over source sizes")
    p.add_argument("--sizes", default="2000,5000,10000", help="comma-separated point counts (default: 2000,5000,10000)")
    p.add_argument("--frames", type=int, default=2, help="frames per run (default: 2)")
    p.add_argument("--dense", action="store_true", help="also time the per-point path (default: off)")
    _add_pipeline_flags(p)
    p.add_argument("--out", default=None, help="directory for bench.csv (default: none)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"defgraph: {exc}", file=sys.stderr)
        return exc.code
    except InvalidArgument as exc:
        print(f"defgraph: invalid argument: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (NumericalFailure, DegenerateGeometry, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"defgraph: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DefGraphError as exc:
        print(f"defgraph: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
