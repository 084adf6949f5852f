"""Randomized table combinations/placements and oracle-labelled cost datasets."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import oracle
from .errors import InvalidArgument
from .nncost import CommCostModel, SetDataset, VectorDataset, featurize
from .oracle import OracleParams
from .tables import AUG_DIMS, DEFAULT_MEM_CAP, TablePool, augment_pool, table_size_bytes

DEFAULT_START_RANGE = (0.0, 20.0)
KINDS = ("compute", "comm-fwd", "comm-bwd")
MAX_PLACEMENT_RETRIES = 100


def _rng(seed, i):
    # one stream per sample index: output never depends on generation order
    return np.random.default_rng([seed, i])


def gen_table_combinations(pool: TablePool, n_min: int, n_max: int, count: int, seed: int = 0
                           ) -> list[list[str]]:
    if not 1 <= n_min <= n_max <= len(pool):
        raise InvalidArgument("need 1 <= n_min <= n_max <= pool size")
    out = []
    for i in range(count):
        rng = _rng(seed, i)
        T = int(rng.integers(n_min, n_max + 1))
        idx = rng.choice(len(pool), size=T, replace=False)
        out.append([pool.tables[j].id for j in idx])
    return out


@dataclass(frozen=True)
class Placement:
    table_ids: tuple[str, ...]
    assignment: tuple[int, ...]
    starts: tuple[float, ...]
    device_dims: tuple[int, ...]


def _place_once(tables, D, mem_cap, p, rng):
    order = sorted(range(len(tables)), key=lambda k: -tables[k].dim)
    dims = [0] * D
    mem = [0] * D
    assign = [0] * len(tables)
    for k in order:
        t = tables[k]
        size = table_size_bytes(t)
        cands = [d for d in range(D) if mem[d] + size <= mem_cap]
        if not cands:
            return None
        if rng.random() <= p:
            d = min(cands, key=lambda c: (dims[c], c))
        else:
            d = cands[int(rng.integers(len(cands)))]
        assign[k] = d
        dims[d] += t.dim
        mem[d] += size
    return assign, dims


def gen_table_placements(pool: TablePool, n_min: int, n_max: int, num_devices: int, count: int,
                         start_range_ms: tuple[float, float] = DEFAULT_START_RANGE, seed: int = 0,
                         mem_cap: int = DEFAULT_MEM_CAP, p: float | None = None) -> list[Placement]:
    """Greedy-with-randomness placements covering balanced and skewed device dims.

    ``p`` pins the per-placement greedy probability (normally uniform in [0, 1]).
    """
    if num_devices < 1:
        raise InvalidArgument("num_devices must be >= 1")
    if not 1 <= n_min <= n_max <= len(pool):
        raise InvalidArgument("need 1 <= n_min <= n_max <= pool size")
    lo, hi = start_range_ms
    out = []
    for i in range(count):
        rng = _rng(seed, i)
        for _ in range(MAX_PLACEMENT_RETRIES):
            T = int(rng.integers(n_min, n_max + 1))
            idx = rng.choice(len(pool), size=T, replace=False)
            tables = [pool.tables[j] for j in idx]
            p_greedy = float(rng.random()) if p is None else p
            placed = _place_once(tables, num_devices, mem_cap, p_greedy, rng)
            if placed is not None:
                break
        else:
            raise InvalidArgument(f"placement {i}: no memory-feasible placement after "
                                  f"{MAX_PLACEMENT_RETRIES} draws")
        assign, dims = placed
        starts = rng.uniform(lo, hi, num_devices) if hi > lo else np.full(num_devices, float(lo))
        out.append(Placement(tuple(t.id for t in tables), tuple(assign),
                             tuple(float(s) for s in starts), tuple(dims)))
    return out


# --- labelled samples --------------------------------------------------------

@dataclass(frozen=True)
class ComputeSample:
    table_ids: tuple[str, ...]
    features: tuple[tuple[float, ...], ...]
    cost_ms: float

    def to_dict(self):
        return {"table_ids": list(self.table_ids), "features": [list(f) for f in self.features],
                "cost_ms": self.cost_ms}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["table_ids"]), tuple(tuple(f) for f in d["features"]), d["cost_ms"])


@dataclass(frozen=True)
class CommSample:
    starts: tuple[float, ...]
    device_dims: tuple[int, ...]
    direction: str
    costs_ms: tuple[float, ...]

    def to_dict(self):
        return {"starts": list(self.starts), "device_dims": list(self.device_dims),
                "direction": self.direction, "costs_ms": list(self.costs_ms)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["starts"]), tuple(d["device_dims"]), d["direction"], tuple(d["costs_ms"]))


def collect_compute_samples(combinations: Sequence[Sequence[str]], pool: TablePool,
                            params: OracleParams = oracle.DEFAULT_PARAMS, seed: int = 0
                            ) -> list[ComputeSample]:
    by_id = {t.id: t for t in pool.tables}
    out = []
    for i, ids in enumerate(combinations):
        tables = [by_id[x] for x in ids]
        noise_seed = None if params.noise_sigma == 0 else [seed, i]
        cost = oracle.multi_table_cost(tables, params, noise_seed)
        feats = tuple(tuple(float(v) for v in featurize(t)) for t in tables)
        out.append(ComputeSample(tuple(ids), feats, cost))
    return out


def collect_comm_samples(placements: Sequence[Placement], direction: str,
                         params: OracleParams = oracle.DEFAULT_PARAMS, seed: int = 0
                         ) -> list[CommSample]:
    out = []
    for i, pl in enumerate(placements):
        noise_seed = None if params.noise_sigma == 0 else [seed, i]
        costs = oracle.comm_cost(pl.starts, pl.device_dims, direction, params, noise_seed)
        out.append(CommSample(pl.starts, pl.device_dims, direction, tuple(costs)))
    return out


def default_table_range(kind: str, num_devices: int = 4) -> tuple[int, int]:
    if kind == "compute":
        return (1, 15)
    return (10, 60) if num_devices <= 4 else (20, 120)


def default_start_range(kind: str) -> tuple[float, float]:
    # backward all-to-all is always issued with zero starts, so train on that regime
    return (0.0, 0.0) if kind == "comm-bwd" else DEFAULT_START_RANGE


def generate_dataset(pool: TablePool, kind: str, count: int, seed: int = 0, num_devices: int = 4,
                     table_range: tuple[int, int] | None = None,
                     start_range: tuple[float, float] | None = None,
                     params: OracleParams = oracle.DEFAULT_PARAMS,
                     mem_cap: int = DEFAULT_MEM_CAP, augment: bool = True):
    """Sample and label one dataset; returns ``(header, samples)``.

    The pool is first augmented with every dimension in ``AUG_DIMS`` unless
    ``augment`` is False.
    """
    if kind not in KINDS:
        raise InvalidArgument(f"kind must be one of {KINDS}")
    if augment:
        pool = augment_pool(pool, AUG_DIMS)
    n_min, n_max = table_range or default_table_range(kind, num_devices)
    header = {"kind": kind, "count": count, "seed": seed, "augmented": augment,
              "pool_size": len(pool), "n_min": n_min, "n_max": n_max,
              "oracle_params": params.to_dict()}
    if kind == "compute":
        combos = gen_table_combinations(pool, n_min, n_max, count, seed)
        return header, collect_compute_samples(combos, pool, params, seed)
    start_range = tuple(start_range) if start_range is not None else default_start_range(kind)
    placements = gen_table_placements(pool, n_min, n_max, num_devices, count, start_range, seed,
                                      mem_cap)
    header.update(devices=num_devices, start_range_ms=list(start_range), mem_cap_bytes=mem_cap)
    return header, collect_comm_samples(placements, kind.split("-")[1], params, seed)


# --- JSON-lines files --------------------------------------------------------

def write_jsonl(path, samples, header: dict) -> None:
    with open(path, "w") as f:
        f.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for s in samples:
            f.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


def read_jsonl(path):
    """Return ``(header, samples)``; the sample type follows the header's kind."""
    with open(path) as f:
        header = json.loads(f.readline())["header"]
        cls = ComputeSample if header["kind"] == "compute" else CommSample
        samples = [cls.from_dict(json.loads(line)) for line in f if line.strip()]
    return header, samples


def to_set_dataset(samples: Sequence[ComputeSample]) -> SetDataset:
    return SetDataset.from_sets([np.asarray(s.features) for s in samples], [s.cost_ms for s in samples])


def to_vector_dataset(samples: Sequence[CommSample]) -> VectorDataset:
    X = np.stack([CommCostModel.encode(s.starts, s.device_dims) for s in samples])
    Y = np.asarray([s.costs_ms for s in samples], dtype=np.float64)
    return VectorDataset(X, Y)
