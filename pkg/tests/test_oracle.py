import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from embshard import oracle
from embshard.errors import InvalidArgument, PlanInvalid
from embshard.oracle import DEFAULT_PARAMS as P, OracleParams
from embshard.plan import ShardingPlan
from embshard.tables import AUG_DIMS, ShardingTask, split_column_wise

from conftest import make_table

table_st = st.builds(
    make_table,
    dim=st.sampled_from(AUG_DIMS),
    hash_size=st.integers(1, 10**8),
    pooling_factor=st.floats(0.1, 200),
    skew=st.floats(0, 3),
)


def test_default_params():
    assert (P.kappa_w, P.overhead_per_table, P.launch, P.fusion_gamma) == (2.5e-3, 0.15, 0.5, 0.3)
    assert (P.dim_exponent, P.hash_coef, P.skew_coef) == (0.8, 0.05, 0.3)
    assert (P.comm_latency, P.comm_beta_fwd, P.comm_beta_bwd, P.noise_sigma) == (1.0, 0.010, 0.012, 0.0)


@pytest.mark.parametrize("bad", [dict(kappa_w=0), dict(dim_exponent=1.0), dict(fusion_gamma=1.5),
                                 dict(noise_sigma=-0.1), dict(comm_latency=-1)])
def test_params_validation(bad):
    with pytest.raises(InvalidArgument):
        OracleParams(**bad)


def test_params_roundtrip():
    p = OracleParams(noise_sigma=0.02, launch=0.7)
    assert OracleParams.from_dict(p.to_dict()) == p


def test_work_formula():
    t = make_table(dim=64, pooling_factor=15, hash_size=10**6, skew=0)
    assert oracle.work(t) == pytest.approx(2.5e-3 * 15 * 64**0.8 * 1.3, rel=1e-12)


def test_work_skew_ratio():
    a = oracle.work(make_table(skew=2.0))
    b = oracle.work(make_table(skew=0.0))
    assert a / b == pytest.approx(1 - P.skew_coef, rel=1e-12)
    # skew beyond 2 is clipped
    assert oracle.work(make_table(skew=5.0)) == a


def test_work_minimal_dim_positive():
    assert oracle.work(make_table(dim=4, pooling_factor=1, hash_size=1)) > 0


@given(table_st)
def test_work_monotone(t):
    from dataclasses import replace
    if t.dim < 128:
        assert oracle.work(replace(t, dim=t.dim * 2)) > oracle.work(t)
    assert oracle.work(replace(t, pooling_factor=t.pooling_factor * 1.5)) > oracle.work(t)
    if t.skew < 2:
        assert oracle.work(replace(t, skew=min(t.skew + 0.5, 2))) < oracle.work(t)


def test_single_table_case():
    t = make_table()
    expected = P.launch + P.overhead_per_table + oracle.work(t)
    assert oracle.single_table_cost(t) == expected
    assert oracle.multi_table_cost([t]) == pytest.approx(expected)


def test_ten_table_fusion_gap():
    ts = [make_table(f"t{i}", dim=8 * (i % 4 + 1), pooling_factor=i + 1) for i in range(10)]
    gap = sum(map(oracle.single_table_cost, ts)) - oracle.multi_table_cost(ts)
    assert gap == pytest.approx(9 * P.launch + 10 * (1 - P.fusion_gamma) * P.overhead_per_table)
    assert gap > 0


def test_multi_empty():
    with pytest.raises(InvalidArgument):
        oracle.multi_table_cost([])


def test_noise_seeded():
    p = OracleParams(noise_sigma=0.05)
    ts = [make_table("a"), make_table("b", dim=8)]
    assert oracle.multi_table_cost(ts, p, seed=3) == oracle.multi_table_cost(ts, p, seed=3)
    assert oracle.multi_table_cost(ts, p, seed=3) != oracle.multi_table_cost(ts, p, seed=4)
    assert oracle.multi_table_cost(ts) == oracle.multi_table_cost(ts)


# --- Observations as properties ---------------------------------------------

@given(table_st)
def test_observation1_halves_cost_more_than_half(t):
    if t.dim >= 8:
        whole = oracle.single_table_cost(t)
        for h in split_column_wise(t):
            assert oracle.single_table_cost(h) > whole / 2


@given(st.lists(table_st, min_size=2, max_size=30))
def test_observation2_fusion_discount(ts):
    singles = sum(map(oracle.single_table_cost, ts))
    multi = oracle.multi_table_cost(ts)
    assert singles > multi
    # the gap is linear in the table count and independent of the tables
    assert singles - multi == pytest.approx(
        (len(ts) - 1) * P.launch + len(ts) * (1 - P.fusion_gamma) * P.overhead_per_table, rel=1e-9)


@given(st.integers(1, 8), st.lists(st.integers(0, 4096), min_size=8, max_size=8),
       st.floats(0, 20), st.sampled_from(["fwd", "bwd"]), st.integers(1, 512))
def test_observation3_comm_in_max_dim(D, dims, start, direction, bump):
    dims = dims[:D]
    starts = [start] * D
    base = oracle.comm_cost(starts, dims, direction)
    assert len(set(base)) == 1
    # raising the max dim raises every device's cost
    hi = list(dims)
    hi[int(np.argmax(hi))] += bump
    assert all(b > a for a, b in zip(base, oracle.comm_cost(starts, hi, direction)))
    # lowering a non-max dim changes nothing
    if D > 1:
        lo = list(dims)
        j = int(np.argmin(lo))
        if lo[j] < max(lo):
            lo[j] = 0
            assert oracle.comm_cost(starts, lo, direction) == base


def test_comm_example():
    assert oracle.comm_cost([0] * 4, [100] * 4, "fwd") == pytest.approx([2.0] * 4)


def test_comm_late_start():
    c = oracle.comm_cost([0, 5, 0, 0], [100] * 4, "fwd")
    assert c[0] - c[1] == pytest.approx(5.0)
    assert c[0] == c[2] == c[3]
    assert max(s + x for s, x in zip([0, 5, 0, 0], c)) == pytest.approx(5 + 2.0)


def test_comm_doubling_max_dim():
    a = oracle.comm_cost([0, 0], [50, 100], "bwd")
    b = oracle.comm_cost([0, 0], [50, 200], "bwd")
    beta_term = [x - P.comm_latency for x in a]
    assert [x - P.comm_latency for x in b] == pytest.approx([2 * v for v in beta_term])


def test_comm_errors():
    with pytest.raises(InvalidArgument):
        oracle.comm_cost([0, 0], [1], "fwd")
    with pytest.raises(InvalidArgument):
        oracle.comm_cost([0], [1], "sideways")


# --- plan evaluation ----------------------------------------------------------

def test_eval_single_device():
    ts = (make_table("a", dim=32), make_table("b", dim=64))
    task = ShardingTask(ts, 1)
    ev = oracle.eval_plan(task, ShardingPlan((), (0, 0)))
    compute = oracle.multi_table_cost(ts)
    expected = compute + (P.comm_latency + P.comm_beta_fwd * 96) + (P.comm_latency + P.comm_beta_bwd * 96)
    assert ev.bottleneck == pytest.approx(expected)


def test_eval_balanced_beats_imbalanced_exhaustive():
    ts = tuple(make_table(f"t{i}", dim=32) for i in range(4))
    task = ShardingTask(ts, 2)
    costs = {a: oracle.eval_plan(task, ShardingPlan((), a)).bottleneck
             for a in itertools.product(range(2), repeat=4)}
    best = min(costs.values())
    balanced = [a for a in costs if sum(a) == 2]
    assert all(costs[a] == pytest.approx(best) for a in balanced)
    assert all(costs[a] > best for a in costs if sum(a) != 2)


def test_eval_empty_device():
    ts = (make_table("a", dim=32), make_table("b", dim=16))
    ev = oracle.eval_plan(ShardingTask(ts, 2), ShardingPlan((), (0, 0)))
    assert ev.compute[1] == 0.0
    assert ev.bwd[0] == ev.bwd[1] == pytest.approx(P.comm_latency + P.comm_beta_bwd * 48)


def test_eval_noiseless_closed_form(rng):
    from conftest import random_tables
    ts = tuple(random_tables(rng, 12))
    task = ShardingTask(ts, 3, mem_cap_bytes=10**12)
    assign = tuple(int(x) for x in rng.integers(0, 3, 12))
    ev = oracle.eval_plan(task, ShardingPlan((), assign))
    comp = [oracle.multi_table_cost([t for t, a in zip(ts, assign) if a == d]) if d in assign else 0.0
            for d in range(3)]
    maxdim = max(sum(t.dim for t, a in zip(ts, assign) if a == d) for d in range(3))
    expected = max(comp) + 2 * P.comm_latency + (P.comm_beta_fwd + P.comm_beta_bwd) * maxdim
    assert ev.bottleneck == pytest.approx(expected)


@pytest.mark.parametrize("plan,constraint", [
    (ShardingPlan((), (0, 2)), "device index"),
    (ShardingPlan((), (0,)), "assignment length"),
    (ShardingPlan((5,), (0, 1, 0)), "column plan"),
    (ShardingPlan((1,), (0, 1, 0)), "column plan"),  # dim 4 is not splittable
])
def test_eval_invalid(plan, constraint):
    task = ShardingTask((make_table("a", dim=32), make_table("b", dim=4)), 2)
    with pytest.raises(PlanInvalid) as e:
        oracle.eval_plan(task, plan)
    assert e.value.constraint == constraint


def test_eval_memory_violation():
    big = make_table("big", dim=128, hash_size=5 * 10**6)  # 2.56 GB
    task = ShardingTask((big, big.__class__("b2", 128, 5 * 10**6, 3.0, 0.1)), 2)
    with pytest.raises(PlanInvalid) as e:
        oracle.eval_plan(task, ShardingPlan((), (0, 0)))
    assert e.value.constraint == "memory cap"


@settings(max_examples=50)
@given(st.lists(table_st, min_size=1, max_size=8), table_st.filter(lambda t: t.dim >= 8))
def test_split_on_same_device_raises_compute(others, t):
    # keeping both halves together only adds overhead (net of the smaller work)
    a, b = split_column_wise(t)
    before = oracle.multi_table_cost(others + [t])
    after = oracle.multi_table_cost(others + [a, b])
    assert after > before


def test_split_alone_can_be_cheaper():
    # with nothing else on the device the split can win: fused overhead 2*gamma < 1
    t = make_table(dim=8, pooling_factor=0.1)
    a, b = split_column_wise(t)
    assert 2 * P.fusion_gamma < 1
    assert oracle.multi_table_cost([a, b]) < oracle.multi_table_cost([t])
