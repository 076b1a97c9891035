"""Time the numba kernels against the pure-numpy fallback.

Each backend runs in its own interpreter, since the choice is made at
import time from ``AUCTIONOPE_NUMBA``.  JIT compilation happens in an
untimed warm-up call, so the numbers are steady-state.

    python benchmarks/bench_kernels.py [--n 5000] [--repeats 3]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def best_of(fn, repeats):
    fn()  # warm-up (compiles on the numba path)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def worker(n, repeats):
    from auctionope import _kernels, sim
    from auctionope.models import TreeParams, fit_kde, fit_tree_ensemble

    log = sim.generate_log(sim.default_config(), sim.default_policies()["X"], n, rng_seed=0)
    X, y = log.contexts, log.rewards[:, 3]
    labels = np.digitize(log.actions, np.quantile(log.actions, [0.25, 0.5, 0.75]))
    params = TreeParams(num_trees=10, max_depth=8, min_leaf=5)
    forest = fit_tree_ensemble(X, y, "regression", params)
    kde = fit_kde(log)
    q = min(n, 2000)
    cases = {
        "forest_regression": lambda: fit_tree_ensemble(X, y, "regression", params),
        "forest_classification": lambda: fit_tree_ensemble(X, labels, "classification", params, num_classes=4),
        "forest_predict": lambda: forest.predict(X),
        "kde_conditional": lambda: kde.conditional(X[:q], log.actions[:q]),
    }
    out = {"backend": _kernels.backend()}
    out.update({name: best_of(fn, repeats) for name, fn in cases.items()})
    print(json.dumps(out))


def run_backend(flag, n, repeats):
    env = dict(os.environ, AUCTIONOPE_NUMBA=flag, OPE_THREADS="1")
    cmd = [sys.executable, __file__, "--worker", "--n", str(n), "--repeats", str(repeats)]
    res = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=5000)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        worker(args.n, args.repeats)
        return

    fast = run_backend("1", args.n, args.repeats)
    slow = run_backend("0", args.n, args.repeats)
    print(f"n={args.n}, best of {args.repeats}, one thread")
    print(f"{'kernel':<24}{fast['backend']:>10}{slow['backend']:>10}{'speedup':>10}")
    for name in fast:
        if name == "backend":
            continue
        print(f"{name:<24}{fast[name]:>9.3f}s{slow[name]:>9.3f}s{slow[name] / fast[name]:>9.1f}x")


if __name__ == "__main__":
    main()
