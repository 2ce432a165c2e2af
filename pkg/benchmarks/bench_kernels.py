"""Time the compiled kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--points 20000]
"""

import argparse
import time

import numpy as np

from defgraph import kernels
from defgraph.core import SpatialGrid


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n, rng):
    pts = rng.uniform(-0.5, 0.5, (n, 3))
    grid = SpatialGrid(pts)
    queries = rng.uniform(-0.5, 0.5, (n // 4, 3))
    uv = np.ascontiguousarray(pts[:, :2])
    values = rng.normal(size=(n, 8))
    plane = rng.normal(size=(256, 256, 8))
    args = (grid.points, grid.order, grid.cell_start, grid.origin, grid.h, grid.dims)
    return {
        "fps (256 of n)": lambda m: m.fps(pts, 256, 0),
        "grid_knn (k=8)": lambda m: m.grid_knn(*args, queries, 8),
        "splat_plane (256^2)": lambda m: m.splat_plane(uv, values, 256),
        "sample_plane": lambda m: m.sample_plane(plane, uv),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    found = kernels.backends()
    if "cython" not in found:
        print("compiled extension not built; only the numpy backend is timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}" + "".join(f"{name:>12}" for name in found) + ("     speedup" if len(found) > 1 else ""))
    for label, fn in cases(args.points, rng).items():
        t = {name: best_of(lambda: fn(mod), args.repeat) for name, mod in found.items()}
        row = f"{label:<22}" + "".join(f"{t[name] * 1e3:>10.2f}ms" for name in found)
        if len(found) > 1:
            row += f"{t['python'] / t['cython']:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
