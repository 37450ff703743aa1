"""Time the compiled and numpy kernels on the same local-update workload.

    python3 benchmarks/bench_kernels.py [--sizes 784,128,128,10] [--n 1000] [--batch 50] [--repeat 5]
"""

import argparse
import math
import time

import numpy as np

from fedunfold import kernels
from fedunfold.model import mlp_init


def workload(sizes, n, batch, seed=0):
    rng = np.random.default_rng(seed)
    theta = mlp_init(sizes, seed=seed).theta
    X = rng.random((n, sizes[0]))
    Y = np.eye(sizes[-1])[rng.integers(0, sizes[-1], size=n)]
    order = rng.permutation(n).astype(np.int64)
    steps = math.ceil(n / batch)
    ptr = np.minimum(np.arange(steps + 1) * batch, n).astype(np.int64)
    scales = np.full(steps, 0.01)
    return theta, X, Y, order, ptr, scales


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="784,128,128,10")
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--batch", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    sizes = tuple(int(s) for s in args.sizes.split(","))
    theta, X, Y, order, ptr, scales = workload(sizes, args.n, args.batch)

    results = {}
    for name in ("python", "cython"):
        try:
            k = kernels.get_backend(name)
        except ImportError:
            print(f"{name:>7}: not built")
            continue
        out = k.sgd_steps(theta, sizes, X, Y, order, ptr, scales, 0)
        t = best_time(lambda: k.sgd_steps(theta, sizes, X, Y, order, ptr, scales, 0), args.repeat)
        results[name] = (t, out)
        print(f"{name:>7}: {t * 1e3:8.2f} ms per epoch ({ptr.size - 1} steps, layers {sizes})")

    if len(results) == 2:
        (tp, op), (tc, oc) = results["python"], results["cython"]
        print(f"speedup: {tp / tc:.2f}x   max |difference|: {np.max(np.abs(op - oc)):.2e}")


if __name__ == "__main__":
    main()
