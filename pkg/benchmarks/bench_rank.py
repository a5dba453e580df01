"""Compiled rank kernel vs the numpy fallback on random ranking problems.

    python benchmarks/bench_rank.py [--sizes 100x1000,500x5000] [--repeat 5]

Both backends get the same pre-sorted gallery orders; the script checks their
outputs are bitwise equal before timing.
"""
import argparse
import sys
import timeit

import numpy as np

from clipreid.evaluation import CYTHON_AVAILABLE, evaluate_ranked, evaluate_ranked_py


def problem(n_q, n_g, n_ids, n_cams, seed=0):
    rng = np.random.default_rng(seed)
    dist = rng.random((n_q, n_g))
    order = np.argsort(dist, axis=1, kind="stable").astype(np.int64)
    q_pids = rng.integers(0, n_ids, n_q).astype(np.int64)
    g_pids = rng.integers(0, n_ids, n_g).astype(np.int64)
    q_cams = rng.integers(0, n_cams, n_q).astype(np.int64)
    g_cams = rng.integers(0, n_cams, n_g).astype(np.int64)
    return order, q_pids, g_pids, q_cams, g_cams


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--sizes", default="100x1000,500x5000,2000x10000")
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--max-rank", type=int, default=50)
    args = parser.parse_args(argv)
    if not CYTHON_AVAILABLE:
        print("compiled kernel not built; run `pip install -e . --no-build-isolation` first")
        return 1
    print(f"{'Q x G':>14}  {'numpy (ms)':>11}  {'compiled (ms)':>13}  {'speed-up':>8}")
    for size in args.sizes.split(","):
        n_q, n_g = (int(v) for v in size.split("x"))
        data = problem(n_q, n_g, n_ids=max(2, n_g // 20), n_cams=6)
        a = evaluate_ranked(*data, args.max_rank, use_cython=True)
        b = evaluate_ranked_py(*data, args.max_rank)
        assert all(np.array_equal(x, y) for x, y in zip(a, b)), "backends disagree"
        t_py = min(timeit.repeat(lambda: evaluate_ranked_py(*data, args.max_rank),
                                 number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: evaluate_ranked(*data, args.max_rank, use_cython=True),
                                 number=1, repeat=args.repeat))
        print(f"{size:>14}  {1e3 * t_py:11.2f}  {1e3 * t_cy:13.2f}  {t_py / t_cy:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
