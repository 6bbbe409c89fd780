"""Time the compiled geometry kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--points 200000] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from boxpseudo import kernels


def cases(n, rng):
    pts = rng.uniform(-3, 3, size=(n, 3))
    centers = rng.uniform(-2, 2, size=(16, 3))
    dims = rng.uniform(0.3, 2.0, size=(16, 3))
    _, keys = kernels.voxel_cluster(pts[: n // 4], 0.05)
    values = rng.normal(size=(n, 32))
    ids = rng.integers(0, 1000, size=n)
    field = rng.normal(size=(32, 32, 32, 3))
    return {
        "points_in_boxes": lambda k: k.points_in_boxes(pts, centers, dims),
        "voxel_keys": lambda k: k.voxel_keys(pts, 0.02),
        "neighbor_table": lambda k: k.neighbor_table(keys),
        "segment_sum": lambda k: k.segment_sum(values, ids, 1000),
        "trilinear": lambda k: k.trilinear(field, np.full(3, -3.0), 0.2, pts),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--points", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.backends()
    if "compiled" not in backends:
        print("compiled backend unavailable; build with `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}" + "".join(f"{name:>12}" for name in backends) + f"{'speedup':>10}")
    for name, fn in cases(args.points, rng).items():
        times = {b: min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) for b, mod in backends.items()}
        row = f"{name:<16}" + "".join(f"{1e3 * t:>10.1f}ms" for t in times.values())
        if "compiled" in times:
            row += f"{times['python'] / times['compiled']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
