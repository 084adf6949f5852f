"""End-to-end evaluation, ablations and hyperparameter sweeps.

Plans are measured with the analytical oracle (the stand-in for real GPU
timings), with the cost-model simulator, or both. Report JSON is a pure
function of inputs and seeds; wall-clock times are kept on the report object
and written to a separate timing file so the JSON stays byte-reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from . import datagen, nncost, oracle
from .baselines import ALGORITHMS as BASELINES, run_baseline
from .errors import ConfigurationError, InvalidArgument, PlanInvalid
from .nncost import CostModelBundle, model_to_dict
from .oracle import OracleParams
from .plan import ShardingPlan
from .search import PredictionCache, SearchHyper, beam_search, simulate_plan_cost
from .tables import ShardingTask, TablePool
from .validate import plan_violations

log = logging.getLogger(__name__)

NEUROSHARD = "neuroshard"
ABLATIONS = ("no_beam", "no_grid", "no_cache")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def model_fingerprints(models: CostModelBundle) -> dict:
    if models.fingerprints:
        return dict(models.fingerprints)
    return {
        "compute": _digest(model_to_dict(models.compute)),
        "comm-fwd": _digest(model_to_dict(models.comm_fwd)),
        "comm-bwd": _digest(model_to_dict(models.comm_bwd)),
    }


@dataclass(frozen=True)
class Variant:
    """One algorithm configuration to run over the task set."""

    name: str
    algorithm: str = NEUROSHARD
    hyper: SearchHyper = SearchHyper()
    cache: bool = True


def ablation_variant(flag: str, hyper: SearchHyper = SearchHyper()) -> Variant:
    if flag == "no_beam":
        return Variant(f"{NEUROSHARD}[no_beam]", hyper=replace(hyper, L=0))
    if flag == "no_grid":
        # a single uncapped greedy pass instead of sweeping the max-dim cap
        return Variant(f"{NEUROSHARD}[no_grid]", hyper=replace(hyper, M=1, dim_cap=False))
    if flag == "no_cache":
        return Variant(f"{NEUROSHARD}[no_cache]", hyper=hyper, cache=False)
    raise InvalidArgument(f"unknown ablation {flag!r}; expected one of {ABLATIONS}")


@dataclass
class TaskRow:
    task: int
    algorithm: str
    feasible: bool
    oracle_cost_ms: float | None = None
    model_cost_ms: float | None = None
    n_splits: int = 0
    cache_hit_rate: float | None = None
    model_evals: int | None = None
    plans_evaluated: int | None = None
    feasibility_agrees: bool = True


@dataclass
class EvalReport:
    config: dict
    summary: dict
    rows: list[TaskRow]
    timings: dict = field(default_factory=dict)  # algorithm -> per-task seconds

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "summary": self.summary,
            "tasks": [r.__dict__ for r in self.rows],
        }

    def write(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        fields = list(TaskRow.__dataclass_fields__)
        with open(path.with_suffix(".csv"), "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow(r.__dict__)
        timing = {
            name: {"per_task_s": ts, "mean_s": statistics.fmean(ts) if ts else None}
            for name, ts in self.timings.items()
        }
        path.with_suffix(".timing.json").write_text(json.dumps(timing, indent=1) + "\n")

    def mean_time(self, name: str) -> float | None:
        ts = self.timings.get(name)
        return statistics.fmean(ts) if ts else None


def _measure(task, plan, models, params, evaluator, row: TaskRow):
    problems = plan_violations(task, plan)
    if problems:
        raise PlanInvalid("plan revalidation", "; ".join(problems))
    oracle_ok = model_ok = True
    if evaluator in ("oracle", "both"):
        try:
            row.oracle_cost_ms = oracle.eval_plan(task, plan, params).bottleneck
        except PlanInvalid:
            oracle_ok = False
    if evaluator in ("model", "both"):
        try:
            row.model_cost_ms = simulate_plan_cost(models, task, plan.col, plan.assign,
                                                   PredictionCache(models.compute))[0]
        except PlanInvalid:
            model_ok = False
    row.feasibility_agrees = oracle_ok == model_ok
    row.feasible = oracle_ok and model_ok


def _run_variant(v: Variant, idx: int, task: ShardingTask, models, params, evaluator, seed,
                 pre_split: bool):
    row = TaskRow(task=idx, algorithm=v.name, feasible=False)
    t0 = time.perf_counter()
    if v.algorithm == NEUROSHARD:
        cache = PredictionCache(models.compute, enabled=v.cache)
        res = beam_search(models, task, v.hyper, cache)
        elapsed = time.perf_counter() - t0
        row.cache_hit_rate = res.cache_hit_rate
        row.model_evals = res.model_evals
        row.plans_evaluated = res.plans_evaluated
        plan = res.plan
    elif v.algorithm in BASELINES:
        col: tuple[int, ...] = ()
        tabs = list(task.tables)
        if pre_split:
            ns = beam_search(models, task, v.hyper)
            if ns.plan is not None:
                col, tabs = ns.plan.col, ns.tables_after_split
        t0 = time.perf_counter()
        assign = run_baseline(v.algorithm, tabs, task.num_devices, task.mem_cap_bytes,
                              seed=seed + idx)
        elapsed = time.perf_counter() - t0
        plan = None if assign is None else ShardingPlan(col, assign)
    else:
        raise InvalidArgument(f"unknown algorithm {v.algorithm!r}")
    if plan is not None:
        row.n_splits = len(plan.col)
        _measure(task, plan, models, params, evaluator, row)
    return row, elapsed


def _summarize(rows: Sequence[TaskRow], strict: bool) -> dict:
    n = len(rows)
    ok = [r for r in rows if r.feasible]
    success = len(ok) / n if n else 0.0
    oc = [r.oracle_cost_ms for r in ok if r.oracle_cost_ms is not None]
    mc = [r.model_cost_ms for r in ok if r.model_cost_ms is not None]
    both = [r for r in ok if r.oracle_cost_ms is not None and r.model_cost_ms is not None]
    hit = [r.cache_hit_rate for r in rows if r.cache_hit_rate is not None]
    evals = [r.model_evals for r in rows if r.model_evals is not None]
    mean_oc = statistics.fmean(oc) if oc else None
    return {
        "n_tasks": n,
        "success_rate": success,
        "mean_cost_ms": mean_oc if (success == 1.0 or not strict) else None,
        "mean_cost_feasible_ms": mean_oc,
        "mean_model_cost_ms": (statistics.fmean(mc) if mc else None)
        if (success == 1.0 or not strict) else None,
        "mean_rel_gap": statistics.fmean(abs(r.model_cost_ms - r.oracle_cost_ms) / r.oracle_cost_ms
                                         for r in both) if both else None,
        "feasibility_agreement": all(r.feasibility_agrees for r in rows),
        "cache_hit_rate": statistics.fmean(hit) if hit else None,
        "model_evals": sum(evals) if evals else None,
    }


def run_variants(variants: Iterable[Variant], tasks: Sequence[ShardingTask], models: CostModelBundle,
                 params: OracleParams = oracle.DEFAULT_PARAMS, evaluator: str = "oracle",
                 strict: bool = True, seed: int = 0, pre_split: bool = False) -> EvalReport:
    if evaluator not in ("oracle", "model", "both"):
        raise InvalidArgument("evaluator must be 'oracle', 'model' or 'both'")
    if not tasks:
        raise InvalidArgument("no tasks to evaluate")
    if models is None:
        raise ConfigurationError("cost models are required")
    for task in tasks:
        if task.num_devices != models.num_devices:
            raise ConfigurationError(f"models are trained for {models.num_devices} devices, "
                                     f"task has {task.num_devices}")
    variants = list(variants)
    rows: list[TaskRow] = []
    summary: dict = {}
    timings: dict = {}
    for v in variants:
        vrows = []
        times = []
        for i, task in enumerate(tasks):
            row, elapsed = _run_variant(v, i, task, models, params, evaluator, seed, pre_split)
            vrows.append(row)
            times.append(elapsed)
        log.info("%s: success %.3f", v.name, sum(r.feasible for r in vrows) / len(vrows))
        summary[v.name] = _summarize(vrows, strict)
        timings[v.name] = times
        rows.extend(vrows)
    config = {
        "tasks_fingerprint": _digest([t.to_dict() for t in tasks]),
        "model_fingerprints": model_fingerprints(models),
        "oracle_params": params.to_dict(),
        "evaluator": evaluator,
        "strict": strict,
        "seed": seed,
        "pre_split": pre_split,
        "variants": [{"name": v.name, "algorithm": v.algorithm, "hyper": v.hyper.to_dict(),
                      "cache": v.cache} for v in variants],
    }
    return EvalReport(config, summary, rows, timings)


def evaluate(algorithms: Sequence[str], tasks, models, params=oracle.DEFAULT_PARAMS,
             evaluator: str = "oracle", hyper: SearchHyper = SearchHyper(), **kw) -> EvalReport:
    variants = [Variant(a, a, hyper) for a in algorithms]
    return run_variants(variants, tasks, models, params, evaluator, **kw)


def ablate(flags: Sequence[str], tasks, models, params=oracle.DEFAULT_PARAMS,
           hyper: SearchHyper = SearchHyper(), include_full: bool = True, **kw) -> EvalReport:
    variants = [Variant(NEUROSHARD, hyper=hyper)] if include_full else []
    variants += [ablation_variant(f, hyper) for f in flags]
    return run_variants(variants, tasks, models, params, **kw)


def sweep(hyper_name: str, values: Sequence[int], tasks, models, params=oracle.DEFAULT_PARAMS,
          base: SearchHyper = SearchHyper(), **kw) -> tuple[list[dict], EvalReport]:
    if hyper_name not in ("N", "K", "L", "M"):
        raise InvalidArgument("hyper_name must be one of N, K, L, M")
    variants = [Variant(f"{NEUROSHARD}[{hyper_name}={v}]", hyper=replace(base, **{hyper_name: v}))
                for v in values]
    report = run_variants(variants, tasks, models, params, **kw)
    table = []
    for v, var in zip(values, variants):
        s = report.summary[var.name]
        table.append({"value": v, "mean_cost_ms": s["mean_cost_feasible_ms"],
                      "success_rate": s["success_rate"], "mean_time_s": report.mean_time(var.name)})
    return table, report


def build_models(pool: TablePool, out_dir, count: int = 10_000, epochs: int = 200, seed: int = 0,
                 num_devices: int = 4, params: OracleParams = oracle.DEFAULT_PARAMS,
                 ) -> tuple[CostModelBundle, dict]:
    """Generate the three datasets, train one model per kind and save them.

    Returns the loaded bundle and per-kind training metrics. Datasets are
    written next to the weights as ``<kind>.jsonl``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = {}
    for i, kind in enumerate(datagen.KINDS):
        header, samples = datagen.generate_dataset(pool, kind, count, seed + i, num_devices,
                                                   params=params)
        datagen.write_jsonl(out_dir / f"{kind}.jsonl", samples, header)
        cfg = nncost.TrainConfig(epochs=epochs, seed=seed)
        if kind == "compute":
            model, data = nncost.ComputeCostModel(seed=seed), datagen.to_set_dataset(samples)
        else:
            model = nncost.CommCostModel(num_devices, kind.split("-")[1], seed=seed)
            data = datagen.to_vector_dataset(samples)
        model, metrics[kind] = nncost.train(model, data, cfg)
        nncost.save_model(model, out_dir / nncost.MODEL_FILES[kind], cfg, metrics[kind])
    return CostModelBundle.load(out_dir), metrics
