"""Plan search over pre-trained cost models.

The outer loop is a beam search over column-wise split sequences; each
candidate split sequence is scored by a greedy grid search that assigns the
resulting tables to devices under a swept max-device-dimension cap. All
compute-cost predictions go through one life-long ``PredictionCache``.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import InvalidArgument, PlanInvalid
from .nncost import CostModelBundle, predict_comm, quantize_encoding
from .plan import ShardingPlan, apply_column_plan, group_by_device
from .tables import ShardingTask, TableConfig, is_splittable, split_column_wise, table_size_bytes


def table_digest(t: TableConfig) -> tuple[int, int]:
    h = hashlib.blake2b(f"{t.base_id}\x00{t.dim}".encode(), digest_size=16).digest()
    return int.from_bytes(h[:8], "little"), int.from_bytes(h[8:], "little")


_MASK = (1 << 64) - 1


class PredictionCache:
    """Life-long memo of compute-cost predictions.

    A table set is keyed by its multiset of ``(base id, dim)`` pairs, folded
    into a 128-bit order-independent digest. Disabling the cache keeps the
    counters but evaluates the model on every query.
    """

    def __init__(self, compute_model, enabled: bool = True, backend: str | None = None):
        self.model = compute_model
        self.enabled = enabled
        self.backend = backend or _kernels.DEFAULT_BACKEND
        self.engine = _kernels.make_engine(compute_model, enabled, self.backend)
        self._entries: dict[tuple[str, int], tuple[np.ndarray, int, int]] = {}

    def entry(self, t: TableConfig):
        e = self._entries.get(t.key)
        if e is None:
            k1, k2 = table_digest(t)
            e = (quantize_encoding(self.model.encode_table(t)), k1, k2)
            self._entries[t.key] = e
        return e

    def get_or_compute(self, tables: Sequence[TableConfig]) -> float:
        if len(tables) == 0:
            raise InvalidArgument("cannot predict the cost of an empty table set")
        q = None
        k1 = k2 = 0
        for t in tables:
            qe, a, b = self.entry(t)
            q = qe.copy() if q is None else q + qe
            k1 = (k1 + a) & _MASK
            k2 = (k2 + b) & _MASK
        return self.engine.query(q, k1, k2)

    @property
    def hits(self) -> int:
        return self.engine.hits

    @property
    def misses(self) -> int:
        return self.engine.misses

    @property
    def evals(self) -> int:
        return self.engine.evals

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def __len__(self):
        return len(self.engine)


def cache_get_or_compute(cache: PredictionCache, tables: Sequence[TableConfig]) -> float:
    return cache.get_or_compute(tables)


@dataclass(frozen=True)
class SearchHyper:
    N: int = 10
    K: int = 3
    L: int = 10
    M: int = 11
    dim_cap: bool = True  # False: one uncapped greedy pass replaces the grid

    def __post_init__(self):
        if min(self.N, self.K, self.M) < 1 or self.L < 0:
            raise InvalidArgument("N, K, M must be >= 1 and L >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# --- plan scoring ------------------------------------------------------------

def score_devices(models: CostModelBundle, compute, device_dims):
    compute = np.asarray(compute, dtype=np.float64)
    fwd = predict_comm(models.comm_fwd, compute, device_dims)
    bwd = predict_comm(models.comm_bwd, np.zeros(len(compute)), device_dims)
    totals = compute + fwd + bwd
    return float(totals.max()), {
        "compute": compute.tolist(), "fwd": fwd.tolist(), "bwd": bwd.tolist(),
        "per_device": totals.tolist(),
    }


def simulate_plan_cost(models: CostModelBundle, task: ShardingTask, col: Sequence[int],
                       assign: Sequence[int], cache: PredictionCache | None = None):
    """Model-predicted bottleneck cost of a plan and its per-device breakdown."""
    if cache is None:
        cache = PredictionCache(models.compute)
    try:
        tables = apply_column_plan(task.tables, col)
    except (IndexError, ValueError) as e:
        raise PlanInvalid("column plan", str(e)) from None
    D = task.num_devices
    if len(assign) != len(tables):
        raise PlanInvalid("assignment length", f"{len(assign)} != {len(tables)}")
    if any(not 0 <= d < D for d in assign):
        raise PlanInvalid("device index", f"entries must lie in [0, {D})")
    groups = group_by_device(tables, assign, D)
    for d, g in enumerate(groups):
        if sum(table_size_bytes(t) for t in g) > task.mem_cap_bytes:
            raise PlanInvalid("memory cap", f"device {d}")
    compute = [cache.get_or_compute(g) if g else 0.0 for g in groups]
    dims = [sum(t.dim for t in g) for g in groups]
    return score_devices(models, compute, dims)


# --- inner loop: greedy grid search ------------------------------------------

@dataclass
class GridResult:
    cost: float
    assign: tuple[int, ...]
    max_dim: float
    grid_index: int


def dim_grid(total_dim: float, num_devices: int, M: int) -> list[float]:
    start = total_dim / num_devices
    end = 1.5 * start
    if M == 1:
        return [start]
    return [start + k * (end - start) / (M - 1) for k in range(M)]


def greedy_grid_search(models: CostModelBundle, cache: PredictionCache,
                       tables: Sequence[TableConfig], num_devices: int, mem_cap: int,
                       M: int = 11, dim_cap: bool = True) -> GridResult | None:
    """Best cost-greedy assignment over a grid of max-device-dim caps, or None."""
    if M < 1:
        raise InvalidArgument("M must be >= 1")
    T = len(tables)
    entries = [cache.entry(t) for t in tables]
    qemb = np.stack([e[0] for e in entries])
    keys = np.array([[e[1], e[2]] for e in entries], dtype=np.uint64)
    dims = np.array([t.dim for t in tables], dtype=np.int64)
    sizes = np.array([table_size_bytes(t) for t in tables], dtype=np.int64)
    single = [cache.engine.query(e[0], e[1], e[2]) for e in entries]
    order = np.array(sorted(range(T), key=lambda i: (-single[i], i)), dtype=np.int64)
    grid = dim_grid(float(dims.sum()), num_devices, M) if dim_cap else [math.inf]

    backend = _kernels.get_backend(cache.backend)
    assign, dev_cost, feasible = backend.greedy_passes(
        cache.engine, qemb, keys, dims, sizes, order, num_devices, int(mem_cap),
        np.asarray(grid, dtype=np.float64))

    best = None
    for g in range(len(grid)):
        if not feasible[g]:
            continue
        dev_dims = np.bincount(assign[g], weights=dims, minlength=num_devices)
        cost, _ = score_devices(models, dev_cost[g], dev_dims)
        if best is None or cost < best.cost:
            best = GridResult(cost, tuple(int(a) for a in assign[g]), grid[g], g)
    return best


# --- outer loop: beam search -------------------------------------------------

@dataclass
class SearchResult:
    plan: ShardingPlan | None
    tables_after_split: list[TableConfig] | None
    hyper: SearchHyper
    plans_evaluated: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    model_evals: int = 0
    wall_time_s: float = 0.0

    @property
    def feasible(self) -> bool:
        return self.plan is not None

    @property
    def cache_hit_rate(self) -> float:
        total = self.cache_hits + self.cache_misses
        return self.cache_hits / total if total else 0.0


def split_candidates(tables: Sequence[TableConfig], cache: PredictionCache, N: int) -> list[int]:
    """Top-N splittable tables by predicted single-table cost, then top-N by size."""
    idx = [i for i, t in enumerate(tables) if is_splittable(t)]
    single = {i: cache.get_or_compute([tables[i]]) for i in idx}
    by_cost = sorted(idx, key=lambda i: (-single[i], i))[:N]
    by_size = sorted(idx, key=lambda i: (-table_size_bytes(tables[i]), i))[:N]
    return list(dict.fromkeys(by_cost + by_size))


def beam_search(models: CostModelBundle, task: ShardingTask, hyper: SearchHyper = SearchHyper(),
                cache: PredictionCache | None = None) -> SearchResult:
    t0 = time.perf_counter()
    if cache is None:
        cache = PredictionCache(models.compute)
    h0, m0, e0 = cache.hits, cache.misses, cache.evals
    D, cap = task.num_devices, task.mem_cap_bytes
    evaluated = 0

    def evaluate(tabs):
        nonlocal evaluated
        evaluated += 1
        return greedy_grid_search(models, cache, tabs, D, cap, hyper.M, hyper.dim_cap)

    base = list(task.tables)
    best = evaluate(base)
    best_col: tuple[int, ...] = ()
    best_tables = base
    beam: list[tuple[tuple[int, ...], list[TableConfig]]] = [((), base)]
    for _ in range(hyper.L):
        ext = []
        for col, tabs in beam:
            for c in split_candidates(tabs, cache, hyper.N):
                first, second = split_column_wise(tabs[c])
                new_tabs = list(tabs)
                new_tabs[c] = first
                new_tabs.append(second)
                res = evaluate(new_tabs)
                cost = res.cost if res is not None else math.inf
                ext.append((cost, col + (c,), new_tabs))
                if res is not None and (best is None or res.cost < best.cost):
                    best, best_col, best_tables = res, col + (c,), new_tabs
        if not ext:
            break
        ext.sort(key=lambda x: x[0])  # stable: ties keep generation order
        beam = [(col, tabs) for _, col, tabs in ext[:hyper.K]]

    plan = None
    if best is not None:
        plan = ShardingPlan(best_col, best.assign, best.cost)
    return SearchResult(
        plan=plan,
        tables_after_split=best_tables if plan is not None else None,
        hyper=hyper,
        plans_evaluated=evaluated,
        cache_hits=cache.hits - h0,
        cache_misses=cache.misses - m0,
        model_evals=cache.evals - e0,
        wall_time_s=time.perf_counter() - t0,
    )


def plan_to_json(plan: ShardingPlan | None, tables_after_split, hyper: SearchHyper | None,
                 fingerprints: dict | None, algorithm: str = "neuroshard") -> dict:
    d = {"algorithm": algorithm, "feasible": plan is not None}
    if plan is not None:
        d.update(plan.to_dict())
        d["tables_after_split"] = [t.to_dict() for t in tables_after_split]
    if hyper is not None:
        d["hyper"] = hyper.to_dict()
    d["model_fingerprints"] = fingerprints or {}
    return d
