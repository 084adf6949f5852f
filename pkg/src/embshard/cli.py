"""Command-line entry point: ``embshard <subcommand> ...``.

Exit status is 2 on configuration errors (bad flags, missing files, model and
task mismatches). An infeasible sharding task is a normal result, reported in
the output files, and exits 0.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import baselines, datagen, harness, nncost, oracle, tables
from .errors import ConfigurationError, InvalidArgument, PlanInvalid
from .nncost import CostModelBundle, TrainConfig
from .search import SearchHyper, beam_search, plan_to_json
from .plan import ShardingPlan

log = logging.getLogger("embshard")


def _csv_list(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def _int_list(s: str) -> list[int]:
    return [int(x) for x in _csv_list(s)]


def _load_params(path) -> oracle.OracleParams:
    if path is None:
        return oracle.DEFAULT_PARAMS
    return oracle.OracleParams.from_dict(json.loads(Path(path).read_text()))


def _hyper(args) -> SearchHyper:
    return SearchHyper(N=args.N, K=args.K, L=args.L, M=args.M)


def _add_hyper(p):
    p.add_argument("--N", type=int, default=10, help="candidate tables per ranking")
    p.add_argument("--K", type=int, default=3, help="beam width")
    p.add_argument("--L", type=int, default=10, help="column-wise split steps")
    p.add_argument("--M", type=int, default=11, help="max-dim grid points")


def _pick_task(path, index):
    tasks = tables.load_tasks(path)
    if not 0 <= index < len(tasks):
        raise InvalidArgument(f"task index {index} out of range ({len(tasks)} tasks)")
    return tasks[index]


# --- subcommands -------------------------------------------------------------

def cmd_gen_pool(args):
    if args.from_csv:
        pool = tables.load_pool_csv(args.from_csv, seed=args.seed)
    else:
        pool = tables.gen_pool(args.num_tables, args.seed)
    tables.save_pool(pool, args.out)
    log.info("wrote %d tables to %s", len(pool), args.out)


def cmd_gen_tasks(args):
    pool = tables.load_pool(args.pool)
    tasks = tables.gen_tasks(pool, args.devices, (args.t_min, args.t_max), args.max_dim, args.count,
                             int(args.mem_cap_gb * tables.GiB), args.seed,
                             max_fill=None if args.max_fill <= 0 else args.max_fill)
    tables.save_tasks(tasks, args.out)
    log.info("wrote %d tasks to %s", len(tasks), args.out)


def cmd_gen_data(args):
    pool = tables.load_pool(args.pool)
    params = _load_params(args.oracle_params)
    if args.noise is not None:
        params = oracle.OracleParams(**{**params.to_dict(), "noise_sigma": args.noise})
    table_range = None
    if args.n_min is not None or args.n_max is not None:
        lo, hi = datagen.default_table_range(args.kind, args.devices)
        table_range = (args.n_min if args.n_min is not None else lo,
                       args.n_max if args.n_max is not None else hi)
    header, samples = datagen.generate_dataset(
        pool, args.kind, args.count, args.seed, args.devices, table_range, args.start_range,
        params, int(args.mem_cap_gb * tables.GiB), augment=not args.no_augment)
    datagen.write_jsonl(args.out, samples, header)
    log.info("wrote %d %s samples to %s", len(samples), args.kind, args.out)


def cmd_train(args):
    header, samples = datagen.read_jsonl(args.data)
    if header["kind"] != args.kind:
        raise ConfigurationError(f"data file holds {header['kind']} samples, not {args.kind}")
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, batch_size=args.batch_size,
                      learning_rate=args.lr)
    if args.kind == "compute":
        model = nncost.ComputeCostModel(seed=args.seed)
        data = datagen.to_set_dataset(samples)
    else:
        model = nncost.CommCostModel(len(samples[0].starts), args.kind.split("-")[1], seed=args.seed)
        data = datagen.to_vector_dataset(samples)
    model, metrics = nncost.train(model, data, cfg, log=log.info)
    nncost.save_model(model, args.out, cfg, metrics)
    print(json.dumps(metrics, sort_keys=True))


def cmd_shard(args):
    task = _pick_task(args.task, args.index)
    models = CostModelBundle.load(args.models)
    if task.num_devices != models.num_devices:
        raise ConfigurationError("task device count does not match the comm models")
    hyper = _hyper(args)
    res = beam_search(models, task, hyper)
    out = plan_to_json(res.plan, res.tables_after_split, hyper, models.fingerprints)
    out["search"] = {"plans_evaluated": res.plans_evaluated, "cache_hits": res.cache_hits,
                     "cache_misses": res.cache_misses, "model_evals": res.model_evals}
    Path(args.out).write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")
    cost = "infeasible" if res.plan is None else f"{res.plan.predicted_cost_ms:.3f} ms"
    log.info("plan: %s, cache hit rate %.3f", cost, res.cache_hit_rate)


def cmd_baseline(args):
    task = _pick_task(args.task, args.index)
    col, tabs = (), list(task.tables)
    fps = None
    if args.presplit_models:
        models = CostModelBundle.load(args.presplit_models)
        res = beam_search(models, task, _hyper(args))
        fps = models.fingerprints
        if res.plan is not None:
            col, tabs = res.plan.col, res.tables_after_split
    assign = baselines.run_baseline(args.algorithm, tabs, task.num_devices, task.mem_cap_bytes,
                                    args.seed)
    plan = None if assign is None else ShardingPlan(col, assign)
    out = plan_to_json(plan, tabs, None, fps, algorithm=args.algorithm)
    if plan is not None:
        out["oracle_cost_ms"] = oracle.eval_plan(task, plan).bottleneck
    Path(args.out).write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")


def _load_eval_inputs(args):
    return tables.load_tasks(args.tasks), CostModelBundle.load(args.models), \
        _load_params(args.oracle_params)


def cmd_eval(args):
    tasks, models, params = _load_eval_inputs(args)
    algos = _csv_list(args.algorithms)
    for a in algos:
        if a != harness.NEUROSHARD and a not in baselines.ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {a!r}")
    report = harness.evaluate(algos, tasks, models, params, args.evaluator, _hyper(args),
                              strict=not args.lenient, seed=args.seed, pre_split=args.pre_split)
    report.write(args.out)
    print(json.dumps(report.summary, indent=1, sort_keys=True))


def cmd_ablate(args):
    tasks, models, params = _load_eval_inputs(args)
    flags = _csv_list(args.flags)
    report = harness.ablate(flags, tasks, models, params, _hyper(args), evaluator=args.evaluator,
                            strict=not args.lenient, seed=args.seed)
    report.write(args.out)
    print(json.dumps(report.summary, indent=1, sort_keys=True))


def cmd_sweep(args):
    tasks, models, params = _load_eval_inputs(args)
    table, report = harness.sweep(args.hyper, _int_list(args.values), tasks, models, params,
                                  _hyper(args), evaluator=args.evaluator, strict=not args.lenient,
                                  seed=args.seed)
    report.write(args.out)
    for row in table:
        print(json.dumps(row, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="embshard", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="cmd", required=True)
    add = sub.add_parser

    p = add("gen-pool", parents=[common], help="generate a synthetic table pool")
    p.add_argument("--num-tables", type=int, default=856)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--from-csv", help="import id,dim,hash_size,pooling_factor,skew rows instead")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_pool)

    p = add("gen-tasks", parents=[common], help="sample sharding tasks from a pool")
    p.add_argument("--pool", required=True)
    p.add_argument("--devices", type=int, default=4)
    p.add_argument("--t-min", type=int, default=10)
    p.add_argument("--t-max", type=int, default=60)
    p.add_argument("--max-dim", type=int, default=128)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--mem-cap-gb", type=float, default=4.0, help="per-device cap in GiB")
    p.add_argument("--max-fill", type=float, default=0.6,
                   help="redraw tasks above this fraction of total memory (<=0 disables)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_tasks)

    p = add("gen-data", parents=[common], help="generate oracle-labelled cost samples")
    p.add_argument("--pool", required=True)
    p.add_argument("--kind", choices=["compute", "comm-fwd", "comm-bwd"], required=True)
    p.add_argument("--count", type=int, default=100000)
    p.add_argument("--devices", type=int, default=4)
    p.add_argument("--n-min", type=int)
    p.add_argument("--n-max", type=int)
    p.add_argument("--start-range", type=float, nargs=2, metavar=("LO", "HI"),
                   help="start timestamps in ms (default 0 20 forward, 0 0 backward)")
    p.add_argument("--mem-cap-gb", type=float, default=4.0)
    p.add_argument("--noise", type=float, help="override oracle noise_sigma")
    p.add_argument("--oracle-params")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = add("train", parents=[common], help="train one cost model")
    p.add_argument("--kind", choices=["compute", "comm-fwd", "comm-bwd"], required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = add("shard", parents=[common], help="search a plan for one task")
    p.add_argument("--task", required=True)
    p.add_argument("--index", type=int, default=0, help="task index inside a task list")
    p.add_argument("--models", required=True)
    _add_hyper(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_shard)

    p = add("baseline", parents=[common], help="run a heuristic sharder on one task")
    p.add_argument("--task", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--algorithm", choices=baselines.ALGORITHMS, required=True)
    p.add_argument("--presplit-models", help="apply the searched column plan first")
    _add_hyper(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    def add_eval_common(p):
        p.add_argument("--tasks", required=True)
        p.add_argument("--models", required=True)
        p.add_argument("--oracle-params")
        p.add_argument("--evaluator", choices=["oracle", "model", "both"], default="both")
        p.add_argument("--lenient", action="store_true",
                       help="report mean cost over feasible tasks even below 100%% success")
        p.add_argument("--seed", type=int, default=0)
        _add_hyper(p)
        p.add_argument("--out", required=True)

    p = add("eval", parents=[common], help="compare algorithms over a task set")
    add_eval_common(p)
    p.add_argument("--algorithms", default="neuroshard,random,size,dim,lookup,size_lookup")
    p.add_argument("--pre-split", action="store_true",
                   help="give baselines the searched column plan")
    p.set_defaults(func=cmd_eval)

    p = add("ablate", parents=[common], help="full search against ablated variants")
    add_eval_common(p)
    p.add_argument("--flags", default="no_beam,no_grid,no_cache")
    p.set_defaults(func=cmd_ablate)

    p = add("sweep", parents=[common], help="vary one search hyperparameter")
    add_eval_common(p)
    p.add_argument("--hyper", choices=["N", "K", "L", "M"], required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigurationError, InvalidArgument, PlanInvalid, FileNotFoundError, KeyError) as e:
        print(f"embshard: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
