"""Compare the compiled and pure-Python kernels.

    python3 benchmarks/bench_kernels.py [--n 1000000] [--repeat 3]

Times each kernel on synthetic arrays, then whole bundled scenarios.
"""

import argparse
import time

import numpy as np

from mna import kernels
from mna.simulator import run_scenario
from mna.textfmt import load_scenario


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(n, rng):
    times = np.sort(rng.integers(0, n // 4, n))
    colors = ((np.arange(n) // (n // 10 or 1)) % 2).astype(np.uint8)
    sizes = rng.integers(1, 4, n)
    return {
        "meter_run": lambda: kernels.meter_run(times, 3, 2, 8, 8, 0),
        "amm_run": lambda: kernels.amm_run(colors, 0, 0, -1),
        "admit_run": lambda: kernels.admit_run(sizes, n),
    }


def scenario_cases():
    return {name: (lambda sc=load_scenario(name): run_scenario(sc))
            for name in ("e5", "e6", "e7")}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    backends = kernels.available()
    if "cython" not in backends:
        print("compiled kernels not built; only the Python backend is available")
    rng = np.random.default_rng(0)
    before = kernels.BACKEND
    groups = [(f"kernels, n={args.n}", kernel_cases(args.n, rng)),
              ("whole scenarios", scenario_cases())]
    print(f"{'case':<14}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    try:
        for title, cases in groups:
            print(f"-- {title}")
            for name, fn in cases.items():
                secs = {}
                for b in backends:
                    kernels.set_backend(b)
                    secs[b] = best_of(fn, args.repeat)
                row = f"{name:<14}" + "".join(f"{secs[b]:>11.3f}s" for b in backends)
                if len(backends) > 1:
                    row += f"{secs['python'] / secs['cython']:>9.1f}x"
                print(row)
    finally:
        kernels.set_backend(before)


if __name__ == "__main__":
    main()
