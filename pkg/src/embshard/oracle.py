"""Deterministic analytical cost model standing in for GPU micro-benchmarks.

Computation cost of a fused multi-table lookup on one device::

    launch + sum_t (fusion_gamma * overhead_per_table + work(t))

with an unfused single lookup paying the full per-table overhead. Sub-linear
scaling in dim makes each column-wise half cost more than half the parent,
and the fusion discount makes a fused lookup cheaper than separate ones.

All-to-all communication finishes for everyone at::

    T_end = max(starts) + comm_latency + beta * max(device_dims)

and each device observes ``T_end - start_d``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, PlanInvalid
from .plan import ShardingPlan, apply_column_plan, group_by_device
from .tables import ShardingTask, TableConfig, table_size_bytes


@dataclass(frozen=True)
class OracleParams:
    kappa_w: float = 2.5e-3
    overhead_per_table: float = 0.15
    launch: float = 0.5
    fusion_gamma: float = 0.3
    dim_exponent: float = 0.8
    hash_coef: float = 0.05
    skew_coef: float = 0.3
    comm_latency: float = 1.0
    comm_beta_fwd: float = 0.010
    comm_beta_bwd: float = 0.012
    noise_sigma: float = 0.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if name == "noise_sigma":
                if v < 0:
                    raise InvalidArgument("noise_sigma must be >= 0")
            elif not v > 0:
                raise InvalidArgument(f"{name} must be positive")
        if not self.dim_exponent < 1:
            raise InvalidArgument("dim_exponent must be < 1")
        if not self.fusion_gamma <= 1:
            raise InvalidArgument("fusion_gamma must be in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OracleParams":
        return cls(**{k: float(v) for k, v in d.items()})


DEFAULT_PARAMS = OracleParams()


def work(t: TableConfig, params: OracleParams = DEFAULT_PARAMS) -> float:
    p = params
    return (
        p.kappa_w
        * t.pooling_factor
        * t.dim ** p.dim_exponent
        * (1.0 + p.hash_coef * math.log10(t.hash_size))
        * (1.0 - p.skew_coef * min(t.skew, 2.0) / 2.0)
    )


def _noise(value, params: OracleParams, seed):
    if params.noise_sigma == 0.0:
        return value
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, params.noise_sigma, np.shape(value))
    return value * (1.0 + eps)


def single_table_cost(t: TableConfig, params: OracleParams = DEFAULT_PARAMS) -> float:
    return params.launch + params.overhead_per_table + work(t, params)


def multi_table_cost(tables: Sequence[TableConfig], params: OracleParams = DEFAULT_PARAMS,
                     seed=None) -> float:
    if len(tables) == 0:
        raise InvalidArgument("multi_table_cost needs at least one table")
    if len(tables) == 1:
        cost = single_table_cost(tables[0], params)
    else:
        per_table = params.fusion_gamma * params.overhead_per_table
        cost = params.launch + sum(per_table + work(t, params) for t in tables)
    return float(_noise(cost, params, seed))


def comm_cost(starts: Sequence[float], device_dims: Sequence[float], direction: str,
              params: OracleParams = DEFAULT_PARAMS, seed=None) -> list[float]:
    if len(starts) != len(device_dims) or len(starts) == 0:
        raise InvalidArgument("starts and device_dims must be non-empty and equally long")
    if direction == "fwd":
        beta = params.comm_beta_fwd
    elif direction == "bwd":
        beta = params.comm_beta_bwd
    else:
        raise InvalidArgument(f"direction must be 'fwd' or 'bwd', got {direction!r}")
    starts = np.asarray(starts, dtype=np.float64)
    t_end = starts.max() + params.comm_latency + beta * float(max(device_dims))
    costs = _noise(t_end - starts, params, seed)
    return [float(c) for c in costs]


@dataclass
class PlanEvaluation:
    compute: list[float]
    fwd: list[float]
    bwd: list[float]

    @property
    def per_device(self) -> list[float]:
        return [c + f + b for c, f, b in zip(self.compute, self.fwd, self.bwd)]

    @property
    def bottleneck(self) -> float:
        return max(self.per_device)


def eval_plan(task: ShardingTask, plan: ShardingPlan, params: OracleParams = DEFAULT_PARAMS,
              seed=None) -> PlanEvaluation:
    try:
        tables = apply_column_plan(task.tables, plan.col)
    except (IndexError, ValueError) as e:
        raise PlanInvalid("column plan", str(e)) from None
    D = task.num_devices
    if len(plan.assign) != len(tables):
        raise PlanInvalid("assignment length", f"{len(plan.assign)} != {len(tables)}")
    if any(not 0 <= d < D for d in plan.assign):
        raise PlanInvalid("device index", f"entries must lie in [0, {D})")
    groups = group_by_device(tables, plan.assign, D)
    for d, g in enumerate(groups):
        used = sum(table_size_bytes(t) for t in g)
        if used > task.mem_cap_bytes:
            raise PlanInvalid("memory cap", f"device {d} needs {used} bytes > {task.mem_cap_bytes}")

    # distinct noise streams per device/direction when noise is on
    ss = None if seed is None else np.random.SeedSequence(seed).spawn(D + 2)
    compute = [
        multi_table_cost(g, params, None if ss is None else ss[d]) if g else 0.0
        for d, g in enumerate(groups)
    ]
    dims = [sum(t.dim for t in g) for g in groups]
    fwd = comm_cost(compute, dims, "fwd", params, None if ss is None else ss[D])
    bwd = comm_cost([0.0] * D, dims, "bwd", params, None if ss is None else ss[D + 1])
    return PlanEvaluation(compute, fwd, bwd)
