"""Sharding plans: a column-wise split sequence plus a table-to-device assignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .tables import TableConfig, split_column_wise


@dataclass(frozen=True)
class ShardingPlan:
    col: tuple[int, ...]
    assign: tuple[int, ...]  # 0-based device index per post-split table
    predicted_cost_ms: float | None = None

    def to_dict(self) -> dict:
        return {
            "col": list(self.col),
            "assign": list(self.assign),
            "predicted_cost_ms": self.predicted_cost_ms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShardingPlan":
        cost = d.get("predicted_cost_ms")
        return cls(tuple(int(c) for c in d["col"]), tuple(int(a) for a in d["assign"]),
                   None if cost is None else float(cost))


def apply_column_plan(tables: Sequence[TableConfig], col: Sequence[int]) -> list[TableConfig]:
    """Replay a split sequence: step i halves table col[i] in place and appends its twin."""
    out = list(tables)
    for c in col:
        first, second = split_column_wise(out[c])
        out[c] = first
        out.append(second)
    return out


def group_by_device(tables: Sequence[TableConfig], assign: Sequence[int], num_devices: int):
    groups: list[list[TableConfig]] = [[] for _ in range(num_devices)]
    for t, d in zip(tables, assign):
        groups[d].append(t)
    return groups
