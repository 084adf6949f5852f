"""Standalone plan checker.

Deliberately re-derives the post-split table list from raw fields instead of
reusing the split/apply helpers, so it can catch bugs in them.
"""

from __future__ import annotations

from numbers import Integral


def plan_violations(task, plan) -> list[str]:
    rows = [(t.dim, t.hash_size) for t in task.tables]
    problems = []
    for step, c in enumerate(plan.col):
        if not 0 <= c < len(rows):
            problems.append(f"col[{step}]={c} out of range")
            return problems
        dim, hs = rows[c]
        half = dim // 2
        if dim < 8 or half % 4:
            problems.append(f"col[{step}] splits a table of dim {dim}")
            return problems
        rows[c] = (half, hs)
        rows.append((half, hs))

    D = task.num_devices
    if len(plan.assign) != len(rows):
        problems.append(f"assign has {len(plan.assign)} entries for {len(rows)} tables")
        return problems
    mem = [0] * D
    for i, d in enumerate(plan.assign):
        if not (isinstance(d, Integral) and 0 <= d < D):
            problems.append(f"table {i} assigned to invalid device {d!r}")
            continue
        dim, hs = rows[i]
        if dim % 4:
            problems.append(f"table {i} has dim {dim} not divisible by 4")
        mem[d] += dim * hs * 4
    for d in range(D):
        if mem[d] > task.mem_cap_bytes:
            problems.append(f"device {d} holds {mem[d]} bytes > cap {task.mem_cap_bytes}")
    return problems


def is_valid_plan(task, plan) -> bool:
    return not plan_violations(task, plan)
