"""Compiled vs pure-Python sweep kernel on the bundled feeders.

    python benchmarks/bench_sweep.py [--rows N] [--repeat K]

Times single solves (the environment step) and batched solves (the MBO inner
loop), checks both kernels agree, and prints a table.
"""
import argparse
import time

import numpy as np

from voltvar.grid import bundled_case
from voltvar.powerflow import BACKENDS, sweep_system


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=64, help="rows per batched solve")
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if "cython" not in BACKENDS:
        print("compiled kernel not built; only the Python fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'case':10s} {'backend':8s} {'single ms':>10s} {'batch ms':>10s} {'per row us':>11s}")
    for name in ("case33bw", "case69", "case118zh"):
        case = bundled_case(name, with_devices=False)
        sys_ = sweep_system(case)
        nominal = np.array([complex(b.nominal_load_p, b.nominal_load_q) for b in case.buses]) / case.base_mva
        batch = nominal * rng.uniform(0.6, 1.3, (args.rows, 1))
        ref = None
        for backend in sorted(BACKENDS):
            one = best_of(lambda: sys_.solve_loads(nominal[None, :], backend=backend), args.repeat)
            many = best_of(lambda: sys_.solve_loads(batch, backend=backend), max(1, args.repeat // 4))
            V = sys_.solve_loads(batch, backend=backend)[0]
            if ref is None:
                ref = V
            elif np.max(np.abs(V - ref)) > 1e-12:
                raise SystemExit(f"{name}: backends disagree by {np.max(np.abs(V - ref)):.2e}")
            print(f"{name:10s} {backend:8s} {1e3 * one:10.3f} {1e3 * many:10.2f} {1e6 * many / args.rows:11.1f}")


if __name__ == "__main__":
    main()
