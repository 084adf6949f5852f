"""Time the compiled and pure-Python search kernels on the same tasks.

Usage:
    python benchmarks/bench_backends.py --models models/ --tasks tasks.json
    python benchmarks/bench_backends.py            # trains small throwaway models

Both backends must return identical plans; the script exits 1 if they differ.
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import tempfile
import time

from embshard import _kernels, harness, tables
from embshard.nncost import CostModelBundle
from embshard.search import PredictionCache, SearchHyper, beam_search

log = logging.getLogger("bench")


def time_backend(backend, models, tasks, hyper, repeats):
    per_task = []
    plans = []
    for task in tasks:
        best = float("inf")
        for _ in range(repeats):
            cache = PredictionCache(models.compute, backend=backend)
            t0 = time.perf_counter()
            res = beam_search(models, task, hyper, cache)
            best = min(best, time.perf_counter() - t0)
        per_task.append(best)
        plans.append(res.plan)
    return per_task, plans


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--models", help="directory with compute/comm-fwd/comm-bwd model files")
    ap.add_argument("--tasks", help="task list JSON (default: generated)")
    ap.add_argument("--num-tasks", type=int, default=10)
    ap.add_argument("--repeats", type=int, default=3, help="best-of repeats per task")
    ap.add_argument("--L", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true", help="print the result as JSON")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    pool = tables.gen_pool(856, args.seed)
    if args.models:
        models = CostModelBundle.load(args.models)
    else:
        log.info("training throwaway models ...")
        with tempfile.TemporaryDirectory() as d:
            models, _ = harness.build_models(pool, d, count=2000, epochs=20, seed=args.seed,
                                             num_devices=4)
    if args.tasks:
        tasks = tables.load_tasks(args.tasks)[: args.num_tasks]
    else:
        tasks = tables.gen_tasks(pool, models.num_devices, (10, 60), 128, args.num_tasks,
                                 seed=args.seed + 1)

    hyper = SearchHyper(L=args.L)
    backends = sorted(_kernels.BACKENDS)
    results, plans = {}, {}
    for b in backends:
        per_task, plans[b] = time_backend(b, models, tasks, hyper, args.repeats)
        results[b] = {"mean_s": statistics.fmean(per_task), "total_s": sum(per_task)}
        log.info("%-7s mean %.4f s/task  total %.3f s", b, results[b]["mean_s"],
                 results[b]["total_s"])
    identical = all(plans[b] == plans[backends[0]] for b in backends)
    if "cython" in results:
        results["speedup"] = results["python"]["mean_s"] / results["cython"]["mean_s"]
        log.info("speedup %.1fx, identical plans: %s", results["speedup"], identical)
    else:
        log.info("compiled extension unavailable; only the fallback was timed")
    results["identical_plans"] = identical
    if args.json:
        print(json.dumps(results, indent=1, sort_keys=True))
    return 0 if identical else 1


if __name__ == "__main__":
    sys.exit(main())
