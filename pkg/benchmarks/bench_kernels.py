"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Times the active-set enumeration on random small QPs and on a two-hour slice
of the three-bus network, and the greedy run scan on sorted random values.
"""
import argparse
import time

import numpy as np

from storage_lmp import _kernels_py, bundled_case
from storage_lmp.dispatch import build_network_qp
from storage_lmp.qp import QpProblem, active_set_oracle

try:
    from storage_lmp import _kernels
except ImportError:
    _kernels = None


def random_qp(seed, n=8, m=10, me=2):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    x0 = rng.standard_normal(n)
    G = rng.standard_normal((m, n))
    Aeq = rng.standard_normal((me, n))
    return QpProblem(H=A @ A.T + 0.1 * np.eye(n), q=rng.standard_normal(n),
                     Aeq=Aeq, beq=Aeq @ x0, Ain=G, bin=G @ x0 + rng.uniform(0, 1, m))


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation`")
        return

    qps = [random_qp(s) for s in range(40)]
    tb = bundled_case("threebus")
    net = build_network_qp(tb.with_demand(tb.demand[:, 16:18]), 5.0)
    values = np.sort(np.random.default_rng(0).uniform(0, 100, 200_000))

    cases = {
        "oracle, 40 random QPs (n=8, m=10)":
            lambda k: [active_set_oracle(p, kernels=k) for p in qps],
        "oracle, 3-bus 2 h slice (25 rows)":
            lambda k: active_set_oracle(net, max_rows=25, kernels=k),
        "greedy runs, 200k values":
            lambda k: k.greedy_runs(values, 0.5),
    }
    print(f"{'kernel':40s} {'numpy [s]':>10s} {'cython [s]':>11s} {'speedup':>8s}")
    for name, fn in cases.items():
        tp = best_of(lambda: fn(_kernels_py), args.repeat)
        tc = best_of(lambda: fn(_kernels), args.repeat)
        print(f"{name:40s} {tp:10.4f} {tc:11.4f} {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()
