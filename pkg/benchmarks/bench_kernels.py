"""Time the compiled and NumPy kernel backends on toy-network-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from osdquant import _backend
from osdquant.bitalloc import random_problem


def cases(rng):
    x = rng.standard_normal((8, 16, 32, 32))
    cols_shape = (8, 16, 32, 32)
    cols = rng.standard_normal((16 * 9, 8 * 32 * 32))
    rows = rng.standard_normal((8 * 32 * 32, 32))
    p = random_problem(rng, 11, 0.5, max_elems=2048)
    unit = int(np.gcd.reduce(p.costs.ravel()))
    costs = np.ascontiguousarray(p.costs // unit)
    capacity = int(p.budget // unit)
    return {
        "im2col 8x16x32x32 k3": lambda k: k.im2col(x, 3, 3, 1, 1),
        "col2im 8x16x32x32 k3": lambda k: k.col2im(cols, cols_shape, 3, 3, 1, 1),
        "fwht_rows 8192x32": lambda k: k.fwht_rows(rows.copy()),
        "mckp_suffix N=11": lambda k: k.mckp_suffix(p.losses, costs, capacity),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    backends = _backend.available()
    if "cython" not in backends:
        print("compiled extension not built; only the python backend is timed")
    rng = np.random.default_rng(0)
    names = sorted(backends)
    print(f"{'kernel':<24}" + "".join(f"{n + ' ms':>14}" for n in names) + f"{'speedup':>10}")
    for label, fn in cases(rng).items():
        times = {}
        for name in names:
            k = backends[name]
            fn(k)
            times[name] = min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)) * 1e3
        speedup = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{label:<24}" + "".join(f"{times[n]:>14.3f}" for n in names) + f"{speedup:>9.1f}x")


if __name__ == "__main__":
    main()
