"""Embedding-table domain model: tables, pools, sharding tasks and their generators."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgument, NotSplittable

DEFAULT_BATCH_SIZE = 65536
BYTES_PER_ELEMENT = 4  # fp32 weights, optimizer state excluded
GiB = 1024**3
DEFAULT_MEM_CAP = 4 * GiB
AUG_DIMS = (4, 8, 16, 32, 64, 128)


@dataclass(frozen=True)
class TableConfig:
    id: str
    dim: int
    hash_size: int
    pooling_factor: float
    skew: float
    batch_size: int = DEFAULT_BATCH_SIZE

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 4 != 0:
            raise InvalidArgument(f"table {self.id}: dim {self.dim} must be a positive multiple of 4")
        if self.hash_size < 1:
            raise InvalidArgument(f"table {self.id}: hash_size must be >= 1")
        if not self.pooling_factor > 0:
            raise InvalidArgument(f"table {self.id}: pooling_factor must be > 0")
        if not self.skew >= 0:
            raise InvalidArgument(f"table {self.id}: skew must be >= 0")
        if self.batch_size < 1:
            raise InvalidArgument(f"table {self.id}: batch_size must be >= 1")

    @property
    def base_id(self) -> str:
        # halves produced by split_column_wise share the parent's base id
        return self.id.split("/", 1)[0]

    @property
    def key(self) -> tuple[str, int]:
        """Identity used by prediction caches: (base id, dim)."""
        return (self.base_id, self.dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["batch_size"] == DEFAULT_BATCH_SIZE:
            del d["batch_size"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TableConfig":
        return cls(
            id=str(d["id"]),
            dim=int(d["dim"]),
            hash_size=int(d["hash_size"]),
            pooling_factor=float(d["pooling_factor"]),
            skew=float(d["skew"]),
            batch_size=int(d.get("batch_size", DEFAULT_BATCH_SIZE)),
        )


@dataclass(frozen=True)
class TablePool:
    tables: tuple[TableConfig, ...]
    seed: int = 0

    def __post_init__(self):
        ids = [t.id for t in self.tables]
        if len(set(ids)) != len(ids):
            raise InvalidArgument("table ids in a pool must be unique")

    def __len__(self):
        return len(self.tables)

    def __iter__(self):
        return iter(self.tables)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "tables": [t.to_dict() for t in self.tables]}

    @classmethod
    def from_dict(cls, d: dict) -> "TablePool":
        return cls(tuple(TableConfig.from_dict(t) for t in d["tables"]), int(d.get("seed", 0)))


@dataclass(frozen=True)
class ShardingTask:
    tables: tuple[TableConfig, ...]
    num_devices: int
    mem_cap_bytes: int = DEFAULT_MEM_CAP

    def __post_init__(self):
        if self.num_devices < 1:
            raise InvalidArgument("num_devices must be >= 1")
        if len(self.tables) < self.num_devices:
            raise InvalidArgument("a task needs at least as many tables as devices")
        if self.mem_cap_bytes <= 0:
            raise InvalidArgument("mem_cap_bytes must be positive")

    def to_dict(self) -> dict:
        return {
            "num_devices": self.num_devices,
            "mem_cap_bytes": self.mem_cap_bytes,
            "tables": [t.to_dict() for t in self.tables],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShardingTask":
        return cls(
            tuple(TableConfig.from_dict(t) for t in d["tables"]),
            int(d["num_devices"]),
            int(d["mem_cap_bytes"]),
        )


def table_size_bytes(t: TableConfig) -> int:
    return t.hash_size * t.dim * BYTES_PER_ELEMENT


def is_splittable(t: TableConfig) -> bool:
    return t.dim >= 8 and (t.dim // 2) % 4 == 0


def split_column_wise(t: TableConfig) -> tuple[TableConfig, TableConfig]:
    """Halve a table's columns. Both halves keep every other field."""
    if not is_splittable(t):
        raise NotSplittable(f"table {t.id} with dim {t.dim} cannot be split column-wise")
    half = t.dim // 2
    return replace(t, id=f"{t.id}/0", dim=half), replace(t, id=f"{t.id}/1", dim=half)


def augment_pool(pool: TablePool, dims: Iterable[int]) -> TablePool:
    dims = sorted(set(int(d) for d in dims))
    if not dims:
        raise InvalidArgument("dims must be non-empty")
    for d in dims:
        if d <= 0 or d % 4:
            raise InvalidArgument(f"augmentation dim {d} is not a positive multiple of 4")
    out = []
    for t in pool.tables:
        for d in dims:
            out.append(replace(t, id=f"{t.base_id}@d{d}", dim=d))
    return TablePool(tuple(out), pool.seed)


@dataclass(frozen=True)
class PoolConfig:
    """Sampling ranges of the synthetic pool.

    Hash sizes come from two log-uniform tiers: a bulk of ordinary tables and
    a small fraction of very large ones. Only the large tier can overflow a
    4 GiB device at dim 64/128, which is what forces column-wise splits.
    """

    hash_range: tuple[float, float] = (1e4, 1e6)
    large_hash_range: tuple[float, float] = (5e6, 1.2e7)
    large_fraction: float = 0.03
    pooling_range: tuple[float, float] = (1.0, 60.0)
    skew_range: tuple[float, float] = (0.0, 2.0)
    dims: tuple[int, ...] = AUG_DIMS


def _log_uniform(rng: np.random.Generator, lo: float, hi: float, n: int) -> np.ndarray:
    return np.exp(rng.uniform(math.log(lo), math.log(hi), n))


def gen_pool(num_tables: int, seed: int, config: PoolConfig = PoolConfig()) -> TablePool:
    if num_tables < 1:
        raise InvalidArgument("num_tables must be >= 1")
    rng = np.random.default_rng(seed)
    large = rng.random(num_tables) < config.large_fraction
    small_h = _log_uniform(rng, *config.hash_range, num_tables)
    large_h = _log_uniform(rng, *config.large_hash_range, num_tables)
    hashes = np.where(large, large_h, small_h)
    pooling = _log_uniform(rng, *config.pooling_range, num_tables)
    skew = rng.uniform(*config.skew_range, num_tables)
    dims = rng.choice(np.asarray(config.dims), num_tables)
    width = len(str(num_tables - 1))
    tables = tuple(
        TableConfig(
            id=f"t{i:0{width}d}",
            dim=int(dims[i]),
            hash_size=max(1, int(round(hashes[i]))),
            pooling_factor=round(float(pooling[i]), 6),
            skew=round(float(skew[i]), 6),
        )
        for i in range(num_tables)
    )
    return TablePool(tables, seed)


def dims_up_to(max_dim: int) -> list[int]:
    if max_dim not in AUG_DIMS:
        raise InvalidArgument(f"max_dim must be one of {AUG_DIMS}")
    return [d for d in AUG_DIMS if d <= max_dim]


def gen_tasks(
    pool: TablePool,
    num_devices: int,
    t_range: tuple[int, int],
    max_dim: int,
    count: int,
    mem_cap: int = DEFAULT_MEM_CAP,
    seed: int = 0,
    max_fill: float | None = 0.6,
) -> list[ShardingTask]:
    """Sample `count` sharding tasks from a pool.

    Tasks whose total table bytes exceed ``max_fill`` of the aggregate device
    memory are redrawn so that every task admits a sharding plan; single
    tables may still exceed one device's cap. Pass ``max_fill=None`` to keep
    every draw.
    """
    t_min, t_max = t_range
    if t_min > t_max or t_min < 1:
        raise InvalidArgument("t_range must satisfy 1 <= T_min <= T_max")
    if t_max > len(pool):
        raise InvalidArgument(f"T_max={t_max} exceeds pool size {len(pool)}")
    if t_min < num_devices:
        raise InvalidArgument("T_min must be >= num_devices")
    choices = np.asarray(dims_up_to(max_dim))
    rng = np.random.default_rng(seed)
    budget = None if max_fill is None else max_fill * num_devices * mem_cap
    tasks = []
    while len(tasks) < count:
        T = int(rng.integers(t_min, t_max + 1))
        idx = rng.choice(len(pool), size=T, replace=False)
        dims = rng.choice(choices, size=T)
        tables = tuple(replace(pool.tables[i], dim=int(d)) for i, d in zip(idx, dims))
        if budget is not None and sum(table_size_bytes(t) for t in tables) > budget:
            continue
        tasks.append(ShardingTask(tables, num_devices, mem_cap))
    return tasks


# --- serialization -----------------------------------------------------------

def dump_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def save_pool(pool: TablePool, path) -> None:
    dump_json(pool.to_dict(), path)


def load_pool(path) -> TablePool:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return load_pool_csv(path)
    return TablePool.from_dict(json.loads(path.read_text()))


def load_pool_csv(path, seed: int = 0) -> TablePool:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    missing = {"id", "dim", "hash_size", "pooling_factor", "skew"} - set(rows[0] if rows else {})
    if missing:
        raise InvalidArgument(f"CSV pool is missing columns: {sorted(missing)}")
    return TablePool(tuple(TableConfig.from_dict(r) for r in rows), seed)


def save_tasks(tasks: Sequence[ShardingTask], path) -> None:
    dump_json({"tasks": [t.to_dict() for t in tasks]}, path)


def load_tasks(path) -> list[ShardingTask]:
    d = json.loads(Path(path).read_text())
    if "tasks" in d:
        return [ShardingTask.from_dict(t) for t in d["tasks"]]
    return [ShardingTask.from_dict(d)]
