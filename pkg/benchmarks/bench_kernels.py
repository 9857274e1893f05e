"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel with the best-of-N time for each backend and the
speedup. Both backends are checked for identical results first.
"""

import argparse
import timeit

import numpy as np

from tissueflow import kernels


def cases(rng):
    payload = rng.integers(0, 256, 1 << 20, dtype=np.uint8).tobytes()
    tumor = rng.uniform(0, 2000, (3000, 2))
    epi = rng.uniform(0, 2000, (3000, 2))
    grid = rng.random((256, 256)) < 0.45
    ang = np.sort(rng.uniform(0, 2 * np.pi, 400))
    poly = np.column_stack([np.cos(ang), np.sin(ang)]) * rng.uniform(50, 60, 400)[:, None]
    pts = rng.uniform(-70, 70, (20000, 2))
    n, d, k = 2000, 8, 5
    x = rng.normal(size=(n, d))
    y = rng.integers(0, k, n).astype(np.int64)
    theta = rng.normal(size=k * (d + 1))
    return {
        "fnv1a64 (1 MiB)": lambda m: m.fnv1a64(payload),
        "nearest_max_min (3000x3000)": lambda m: m.nearest_max_min(tumor, epi),
        "label_components (256x256, 8-conn)": lambda m: m.label_components(grid, 8)[0],
        "points_in_polygon (20000 pts, 400 verts)": lambda m: m.points_in_polygon(pts, poly),
        "softmax_xent (2000x8, 5 classes)": lambda m: m.softmax_xent(theta, x, y, k, 1e-4)[0],
    }


def same(a, b) -> bool:
    if isinstance(a, np.ndarray):
        return np.array_equal(a, b)
    if isinstance(a, float):
        return abs(a - b) <= 1e-12 * max(1.0, abs(a))
    return a == b


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()

    backends = kernels.backends()
    if "compiled" not in backends:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    fast, slow = backends["compiled"], backends["python"]
    rng = np.random.default_rng(0)
    print(f"{'kernel':44s} {'compiled':>11s} {'python':>11s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        if not same(fn(fast), fn(slow)):
            raise SystemExit(f"{name}: backends disagree")
        t_fast = min(timeit.repeat(lambda: fn(fast), number=1, repeat=args.repeat))
        t_slow = min(timeit.repeat(lambda: fn(slow), number=1, repeat=args.repeat))
        print(f"{name:44s} {t_fast * 1e3:9.2f}ms {t_slow * 1e3:9.2f}ms {t_slow / t_fast:7.1f}x")


if __name__ == "__main__":
    main()
