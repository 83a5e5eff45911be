"""Time the numba and numpy paths of each loop kernel on the shapes used in training.

    python benchmarks/bench_kernels.py [--repeat 20]

The first numba call of each kernel (JIT compile or cache load) is timed
separately and excluded from the steady-state numbers.
"""

import argparse
import time

import numpy as np

from m2repa import _kernels as K


def timed(fn, *args, repeat=20):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    x = rng.normal(size=(8, 12, 8, 8, 8)).astype(np.float32)
    w = rng.normal(size=(12, 12, 3, 3, 3)).astype(np.float32)
    g = rng.normal(size=(8, 12, 8, 8, 8)).astype(np.float32)
    img = rng.uniform(size=(16, 16))
    pred = (rng.uniform(size=(3, 256)) > 0.5)
    gt = (rng.uniform(size=(3, 256)) > 0.5)
    objs = np.column_stack([rng.integers(0, 2, 3), rng.uniform(0, 16, 3), rng.uniform(0, 16, 3),
                            rng.uniform(1, 4, 3), rng.uniform(1, 4, 3), rng.uniform(0.2, 0.9, 3)])
    return [
        ("conv3d", K.conv3d_numpy, K.conv3d_numba, (x, w)),
        ("conv3d_grad_weight", K.conv3d_grad_weight_numpy, K.conv3d_grad_weight_numba, (x, g)),
        ("box_mean 7x7", K.box_mean_numpy, K.box_mean_numba, (img, 7)),
        ("iou_table 3x3", K.iou_table_numpy, K.iou_table_numba, (pred, gt)),
        ("rasterize 16x16", K.rasterize_numpy, K.rasterize_numba, (objs, 16, 16, 1.0)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        print("numba not installed; only the numpy path is available")
        return
    print(f"{'kernel':<20}{'first numba':>14}{'numba':>12}{'numpy':>12}{'speedup':>10}")
    for name, f_np, f_nb, a in cases(np.random.default_rng(0)):
        t0 = time.perf_counter()
        f_nb(*a)
        first = time.perf_counter() - t0
        t_nb = timed(f_nb, *a, repeat=args.repeat)
        t_np = timed(f_np, *a, repeat=args.repeat)
        print(f"{name:<20}{first * 1e3:>12.1f}ms{t_nb * 1e6:>10.0f}us{t_np * 1e6:>10.0f}us{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
