"""Time the numba and numpy likelihood kernels on the same inputs.

    python benchmarks/bench_kernels.py [--n 200000] [--repeat 20]

JIT compilation happens in a warm-up call before any timing.
"""

import argparse
import timeit

import numpy as np

from hypoforge.stats import _kernels


def inputs(n, systems, seed=0):
    rng = np.random.default_rng(seed)
    first = rng.integers(0, systems, n)
    second = (first + rng.integers(1, systems, n)) % systems
    code = rng.integers(-1, 2, n)
    y = np.where(code == 1, 1.0, np.where(code == -1, 0.0, 0.5))
    beta = rng.normal(0, 0.5, systems)
    tau = np.sort(rng.normal(0, 1, 4))
    eta = rng.normal(0, 1, n)
    ratings = rng.integers(1, 6, n)
    return first, second, code, y, np.ones(n), beta, tau, eta, ratings


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200_000, help="rows per call")
    ap.add_argument("--systems", type=int, default=12)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _kernels.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")

    first, second, code, y, w, beta, tau, eta, ratings = inputs(args.n, args.systems)
    cases = {
        "bradley-terry": lambda nb: _kernels.bt_loglik(first, second, y, w, 0.2, beta, True, use_numba=nb),
        "davidson": lambda nb: _kernels.davidson_loglik(first, second, code, w, 0.2, beta, -0.5, True, use_numba=nb),
        "ordered probit": lambda nb: _kernels.probit_loglik(tau, eta, ratings, use_numba=nb),
    }
    print(f"{'kernel':<16}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, call in cases.items():
        call(True)  # compile
        slow = min(timeit.repeat(lambda: call(False), number=1, repeat=args.repeat)) * 1e3
        fast = min(timeit.repeat(lambda: call(True), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<16}{slow:>10.2f}{fast:>10.2f}{slow / fast:>8.1f}x")


if __name__ == "__main__":
    main()
