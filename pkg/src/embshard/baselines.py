"""Reference sharding heuristics: random placement and sorted greedy balancing."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import InvalidArgument
from .tables import TableConfig, table_size_bytes

HEURISTICS = ("size", "dim", "lookup", "size_lookup")
ALGORITHMS = ("random",) + HEURISTICS


def heuristic_cost(t: TableConfig, kind: str) -> float:
    if kind == "size":
        return float(table_size_bytes(t))
    if kind == "dim":
        return float(t.dim)
    if kind == "lookup":
        return t.dim * t.pooling_factor
    if kind == "size_lookup":
        return t.dim * t.pooling_factor * table_size_bytes(t)
    raise InvalidArgument(f"unknown heuristic {kind!r}; expected one of {HEURISTICS}")


def greedy_shard(tables: Sequence[TableConfig], num_devices: int, heuristic: str,
                 mem_cap: int) -> tuple[int, ...] | None:
    """Largest-first greedy onto the feasible device with the lowest running cost sum.

    Returns ``None`` when some table fits on no device.
    """
    if num_devices < 1:
        raise InvalidArgument("num_devices must be >= 1")
    values = [heuristic_cost(t, heuristic) for t in tables]
    order = sorted(range(len(tables)), key=lambda i: (-values[i], i))
    load = [0.0] * num_devices
    mem = [0] * num_devices
    assign = [0] * len(tables)
    for i in order:
        size = table_size_bytes(tables[i])
        cands = [d for d in range(num_devices) if mem[d] + size <= mem_cap]
        if not cands:
            return None
        d = min(cands, key=lambda c: (load[c], c))
        assign[i] = d
        load[d] += values[i]
        mem[d] += size
    return tuple(assign)


def random_shard(tables: Sequence[TableConfig], num_devices: int, mem_cap: int,
                 seed: int = 0) -> tuple[int, ...] | None:
    if num_devices < 1:
        raise InvalidArgument("num_devices must be >= 1")
    rng = np.random.default_rng(seed)
    mem = [0] * num_devices
    assign = []
    for t in tables:
        size = table_size_bytes(t)
        cands = [d for d in range(num_devices) if mem[d] + size <= mem_cap]
        if not cands:
            return None
        d = cands[int(rng.integers(len(cands)))]
        assign.append(d)
        mem[d] += size
    return tuple(assign)


def run_baseline(name: str, tables: Sequence[TableConfig], num_devices: int, mem_cap: int,
                 seed: int = 0) -> tuple[int, ...] | None:
    if name == "random":
        return random_shard(tables, num_devices, mem_cap, seed)
    return greedy_shard(tables, num_devices, name, mem_cap)
