#!/usr/bin/env python3
"""Compare the numba and numpy paths of the hot kernels.

Both backends are exercised in one process through the ``backend=`` argument,
so the ``MMTESID_NUMBA`` flag does not need to change between runs.

    python benchmarks/bench_accel.py [--repeat 20]
"""

import argparse
import time

import numpy as np

from mmtesid import _accel
from mmtesid.kernel import MmteParams


def best_time(func, repeat):
    func()  # warm-up, includes JIT compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        func()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    phi = MmteParams([2.0, 8.0, 1.0], [5.0, 2.5, 0.3], [2.0, 10.0, 40.0], 0.5)
    t = np.arange(1000) * 0.01
    Z = rng.standard_normal((1000, 1000))
    A = np.eye(6) + 0.01 * rng.standard_normal((6, 6))
    A /= 1.01 * np.max(np.abs(np.linalg.eigvals(A)))
    B = rng.standard_normal((6, 1))
    u = rng.standard_normal((20000, 1))
    lags = rng.standard_normal(2000)
    return {
        "propagate (20000 steps, 6 states)":
            lambda b: _accel.propagate(A, B, np.zeros(6), u, backend=b),
        "mmte_block (1000 x 1000, m=3)":
            lambda b: _accel.mmte_block(t, t + 0.5, np.asarray(phi.sigma_sq),
                                        np.asarray(phi.len_sq), np.asarray(phi.omega),
                                        backend=b),
        "diag_sums (1000 x 1000)": lambda b: _accel.diag_sums(Z, backend=b),
        "toeplitz (2000 x 2000)": lambda b: _accel.toeplitz(lags, lags, backend=b),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    backends = [b for b in ("numpy", "numba") if b in _accel.BACKENDS]
    print(f"default backend: {_accel.BACKEND}")
    header = f"{'kernel':<36}" + "".join(f"{b + ' (ms)':>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'speed-up':>10}"
    print(header)
    for name, fn in cases(rng).items():
        t = [best_time(lambda: fn(b), args.repeat) * 1e3 for b in backends]
        row = f"{name:<36}" + "".join(f"{v:>14.3f}" for v in t)
        if len(t) == 2:
            row += f"{t[0] / t[1]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
