"""Time the compiled kernels against the numpy fallback.

Run from the repository root after building the extension::

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from asyncdfl import _kernels_py

try:
    from asyncdfl import _kernels as _compiled
except ImportError:
    _compiled = None


def cases(rng):
    K = 330
    values = rng.standard_normal((6, K))
    masks = (rng.random((6, K)) > 0.3).astype(np.float64)
    weights = rng.dirichlet(np.ones(6))
    x = rng.standard_normal((1000, 32))
    y = rng.integers(10, size=1000)
    xb, yb = x[:50], y[:50]
    w = 0.1 * rng.standard_normal((32, 10))
    b = np.zeros(10)
    models = rng.standard_normal((10, K))
    return {
        "masked_average": lambda m: m.masked_average(values, masks, weights, values[0]),
        "softmax_xent_grad[50]": lambda m: m.softmax_xent_grad(xb, yb, w, b),
        "softmax_xent_grad[1000]": lambda m: m.softmax_xent_grad(x, y, w, b),
        "mean_pairwise_distance": lambda m: m.mean_pairwise_distance(models),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--number", type=int, default=50)
    args = p.parse_args(argv)
    if _compiled is None:
        print("compiled extension not built; only the fallback is timed")
    print(f"{'kernel':<24}{'python (us)':>14}{'cython (us)':>14}{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=args.number, repeat=args.repeat)) / args.number
        if _compiled is None:
            print(f"{name:<24}{t_py * 1e6:>14.1f}{'-':>14}{'-':>10}")
            continue
        t_cy = min(timeit.repeat(lambda: fn(_compiled), number=args.number, repeat=args.repeat)) / args.number
        print(f"{name:<24}{t_py * 1e6:>14.1f}{t_cy * 1e6:>14.1f}{t_py / t_cy:>10.2f}")


if __name__ == "__main__":
    main()
