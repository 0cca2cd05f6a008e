import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgua.errors import ContractError
from mgua.fem import ElementType
from mgua.memory import (
    LONG_TERM_CAPACITY, PRECISION_TIERS, SHORT_TERM_CAPACITY, AdaptiveMemory, LongTermMemory, PolicyKey,
    PolicyKind, deescalate, escalate, kappa_bucket,
)
from mgua.precision import LADDER, PrecisionConfig, PrecisionLevel as L
from mgua.snn import DEFAULT_SYSTOLIC, LayerFeatures, SystolicConfig
from mgua.sparse import P2_4, PatternKind, SparsityPattern, analyze_sparsity
from oracles import ReferenceLRU, closed_form_utilization

MIXED = PrecisionConfig.parse("bf16,bf16,fp32,fp32")
FP32X4 = PrecisionConfig.uniform(L.FP32)
FP64X4 = PrecisionConfig.uniform(L.FP64)


def lru_replay(capacity, n_ops, n_keys, seed):
    rng = np.random.default_rng(seed)
    ours, ref = LongTermMemory(capacity), ReferenceLRU(capacity)
    for i in range(n_ops):
        key = int(rng.integers(n_keys))
        if rng.random() < 0.5:
            assert ours.get(key) == ref.get(key)
        else:
            assert ours.put(key, i) == ref.put(key, i)
        assert len(ours) <= capacity
    return list(ours.items()), ref.order_lru_first()


@pytest.mark.parametrize("capacity,n_keys", [(3, 8), (10000, 15000)])
def test_lru_matches_reference(capacity, n_keys):
    ours, ref = lru_replay(capacity, 10_000, n_keys, seed=capacity)
    assert ours == ref


def test_lru_peek_does_not_bump():
    m = LongTermMemory(2)
    m.put("a", 1)
    m.put("b", 2)
    m.peek("a")
    assert m.put("c", 3) == "a"
    m.get("b")
    assert m.put("d", 4) == "c"
    assert m.evictions == 2


def test_capacities():
    mem = AdaptiveMemory()
    assert all(s.capacity == LONG_TERM_CAPACITY == 10000 for s in mem.long_term.values())
    assert all(s.capacity == SHORT_TERM_CAPACITY == 100 for s in mem.short_term.values())


def test_policy_key_validation():
    with pytest.raises(ContractError):
        PolicyKey(PolicyKind.PRECISION, 7, "tri3")
    with pytest.raises(ContractError):
        PolicyKey(PolicyKind.PRECISION, 1, "conv")
    with pytest.raises(ContractError):
        PolicyKey(PolicyKind.SPARSITY, 1, "d3/3:8")
    k = PolicyKey(PolicyKind.SPARSITY, 2, "d3/2:4")
    assert PolicyKey.from_json(json.loads(json.dumps(k.to_json()))) == k


@pytest.mark.parametrize("kappa,bucket", [(1, 0), (9.99, 0), (10, 1), (999, 2), (1000, 3), (1e5, 5), (1e9, 6)])
def test_kappa_bucket(kappa, bucket):
    assert kappa_bucket(kappa) == bucket


def test_lookup_cold_start():
    mem = AdaptiveMemory()
    assert mem.memory_lookup(50, ElementType.TRI3) == MIXED
    assert mem.memory_lookup(500, ElementType.TRI3) == FP32X4
    assert mem.memory_lookup(1e5, ElementType.TET4) == FP64X4
    # kappa >= 1000 is flagged and pinned to fp64 even inside bucket 3
    assert mem.memory_lookup(2000, ElementType.HEX8) == FP64X4
    for bad in (0.5, math.inf, math.nan):
        with pytest.raises(ContractError):
            mem.memory_lookup(bad, ElementType.TRI3)


def test_lookup_bumps_hits():
    mem = AdaptiveMemory()
    mem.memory_lookup(50, ElementType.TRI3)
    mem.memory_lookup(60, ElementType.TRI3)
    rec = mem.long_term[PolicyKind.PRECISION].peek(mem.precision_key(50, ElementType.TRI3))
    assert rec.hits == 1


def test_record_outcome_ema_and_ring():
    mem = AdaptiveMemory()
    key = mem.precision_key(50, ElementType.TRI3)
    mem.record_outcome(key, 0.5, 2.0)
    rec = mem.long_term[PolicyKind.PRECISION].peek(key)
    assert rec.error_ema == 0.5 and rec.cost_ema == 2.0
    mem.record_outcome(key, 1.0, 4.0)
    assert rec.error_ema == pytest.approx(0.8 * 0.5 + 0.2 * 1.0)
    for i in range(150):
        mem.record_outcome(key, float(i), 1.0)
    buf = list(mem.short_term[PolicyKind.PRECISION])
    assert len(buf) == 100 and [r.error for r in buf] == [float(i) for i in range(50, 150)]
    with pytest.raises(ContractError):
        mem.record_outcome(key, -1.0, 0.0)


def _feed(mem, kappa, err, n=5, etype=ElementType.TRI3):
    key = mem.precision_key(kappa, etype)
    cfg = mem.memory_lookup(kappa, etype)
    for _ in range(n):
        mem.record_outcome(key, err, 1.0, payload=cfg)
    return key


def test_adapt_dead_band():
    mem = AdaptiveMemory()
    _feed(mem, 50, 1e-6)
    _feed(mem, 500, 1e-5)
    assert mem.adapt_policy() == []


def test_adapt_escalates_bucket1():
    mem = AdaptiveMemory()
    key = _feed(mem, 50, 1e-3)
    changes = mem.adapt_policy()
    assert [(c.key, c.old, c.new) for c in changes] == [(key, MIXED, FP32X4)]
    assert mem.memory_lookup(50, ElementType.TRI3) == FP32X4
    # records made under the old config no longer count
    assert mem.adapt_policy() == []


def test_adapt_needs_five_records():
    mem = AdaptiveMemory()
    _feed(mem, 50, 1e-3, n=4)
    assert mem.adapt_policy() == []


def test_adapt_saturates_at_fp64():
    mem = AdaptiveMemory()
    key = _feed(mem, 1e5, 0.5, etype=ElementType.TET4)
    (change,) = mem.adapt_policy()
    assert change.saturated and change.old == change.new == FP64X4 and change.key == key


def test_deescalation_after_three_quiet_rounds():
    mem = AdaptiveMemory()
    _feed(mem, 500, 1e-12)  # bucket 2 starts at fp32 x4
    assert mem.adapt_policy() == []
    _feed(mem, 500, 1e-12)
    assert mem.adapt_policy() == []
    _feed(mem, 500, 1e-12)
    (change,) = mem.adapt_policy()
    assert change.old == FP32X4 and change.new == MIXED
    # the bottom tier is the floor
    for _ in range(6):
        _feed(mem, 500, 1e-12)
        mem.adapt_policy()
    assert mem.memory_lookup(500, ElementType.TRI3) == MIXED


def test_pinned_never_relaxes():
    mem = AdaptiveMemory()
    for _ in range(5):
        _feed(mem, 5000, 0.0)
        mem.adapt_policy()
    assert mem.memory_lookup(5000, ElementType.TRI3) == FP64X4


def test_escalate_deescalate_ladder():
    assert escalate(MIXED) == FP32X4
    assert escalate(FP32X4) == FP64X4
    assert escalate(FP64X4) == FP64X4
    assert deescalate(FP64X4) == FP32X4 and deescalate(MIXED) == MIXED
    odd = PrecisionConfig(L.FP64, L.BF16, L.FP32, L.FP16)
    up = escalate(odd)
    assert up.u_p == L.FP64 and up.u_m == L.FP32 and up.u_s == up.u_q


@given(st.lists(st.tuples(st.floats(1, 1e7), st.sampled_from([0.0, 1e-12, 1e-6, 1e-3, 1.0])), max_size=200))
@settings(max_examples=50, deadline=None)
def test_escalation_stays_on_ladder(events):
    mem = AdaptiveMemory()
    for i, (kappa, err) in enumerate(events):
        cfg = mem.memory_lookup(kappa, ElementType.TET4)
        mem.record_outcome(mem.precision_key(kappa, ElementType.TET4), err, 1.0, payload=cfg)
        if i % 10 == 9:
            mem.adapt_policy()
    for _, rec in mem.long_term[PolicyKind.PRECISION].items():
        for lv in rec.payload.as_tuple()[:3]:
            assert lv in LADDER


def brute_force_tiling(dims_list):
    """Exhaustive candidate scan with the same ordering rule, written independently."""
    best = None
    for t in itertools.product((1, 2, 4, 8, 16), repeat=4):
        if math.prod(t) > 256:
            continue
        util = sum(closed_form_utilization(d, t) for d in dims_list) / len(dims_list)
        cycles = sum(math.prod(math.ceil(D / s) for D, s in zip(d, t)) for d in dims_list)
        spread = sum(abs(math.log2(s) - 2) for s in t)
        key = (-round(util, 12), cycles, spread)
        if best is None or key < best[0]:
            best = (key, t)
    return best[1]


def test_parallelism_cold_start_and_errors():
    mem = AdaptiveMemory()
    assert mem.parallelism_policy("conv") == DEFAULT_SYSTOLIC == SystolicConfig(4, 4, 4, 4)
    with pytest.raises(ContractError):
        mem.parallelism_policy("attention")


def test_parallelism_shrinks_m_for_two_channels():
    mem = AdaptiveMemory()
    cfg = mem.parallelism_policy("conv", [(2, 64, 64, 64)], bucket=1)
    assert cfg.M == 2
    assert cfg.tile == brute_force_tiling([(2, 64, 64, 64)])


@given(st.lists(st.tuples(*[st.integers(1, 40)] * 4), min_size=1, max_size=4))
@settings(max_examples=40, deadline=None)
def test_parallelism_matches_brute_force(dims_list):
    mem = AdaptiveMemory()
    assert mem.parallelism_policy("linear", dims_list).tile == brute_force_tiling(dims_list)


def test_parallelism_singleton_store_greedy():
    mem = AdaptiveMemory()
    mem.record_utilization("depthwise", 2, (6, 4, 4, 4), SystolicConfig(2, 4, 4, 4), 1.0)
    rng = np.random.default_rng(0)
    assert mem.parallelism_policy("depthwise", bucket=2, rng=rng, epsilon=0.0) == SystolicConfig(2, 4, 4, 4)


def test_parallelism_exploration_seeded():
    picks = []
    for _ in range(2):
        mem, rng = AdaptiveMemory(), np.random.default_rng(5)
        picks.append([mem.parallelism_policy("conv", rng=rng, epsilon=0.5).tile for _ in range(30)])
    assert picks[0] == picks[1]
    assert len(set(picks[0])) > 1


@given(st.floats(1e-3, 1e3))
@settings(max_examples=20, deadline=None)
def test_parallelism_cost_scaling_invariant(factor):
    mem = AdaptiveMemory()
    hist = [(3, 16, 8, 8), (7, 16, 8, 8)]
    for d in hist:
        mem.record_utilization("conv", 1, d, DEFAULT_SYSTOLIC, 0.5)
    before = mem.parallelism_policy("conv", mem.utilization_history("conv", 1), bucket=1)
    for _, rec in mem.long_term[PolicyKind.PARALLELISM].items():
        rec.cost_ema *= factor
    assert mem.parallelism_policy("conv", mem.utilization_history("conv", 1), bucket=1) == before


def test_predict_bitwidth():
    mem = AdaptiveMemory()
    f = LayerFeatures(3.0, 4096)
    assert mem.predict_bitwidth(f) == 8
    mem.update_experience(f, 4, 1e-3, 1.0)
    mem.update_experience(f, 2, 0.2, 1.0)
    assert mem.predict_bitwidth(f) == 4
    mem2 = AdaptiveMemory()
    mem2.update_experience(f, 3, 0.5, 1.0)
    mem2.update_experience(f, 5, 0.05, 1.0)
    assert mem2.predict_bitwidth(f) == 8
    with pytest.raises(ContractError):
        mem.update_experience(f, 9, 0.0, 0.0)


def test_experience_buffer_capacity():
    mem = AdaptiveMemory()
    for i in range(1200):
        mem.update_experience(LayerFeatures(1.0, 10), 1 + i % 8, 0.1, 1.0)
    assert len(mem.experience) == 1000 and all(1 <= r.b <= 8 for r in mem.experience)


def test_sparsity_store_lookup():
    mem = AdaptiveMemory()
    chars = analyze_sparsity(np.random.default_rng(0).normal(size=(8, 16)))
    assert mem.sparsity_lookup(chars) is None
    mem.sparsity_store(P2_4, chars, 0.97, 0.5)
    assert mem.sparsity_lookup(chars) == P2_4
    # equal score: structured wins over learned
    mem2 = AdaptiveMemory()
    mem2.sparsity_store(SparsityPattern(PatternKind.LEARNED, (1,) * 32), chars, 0.9, 0.5)
    mem2.sparsity_store(SparsityPattern(PatternKind.P1_3), chars, 0.9, 0.5)
    assert mem2.sparsity_lookup(chars).kind is PatternKind.P1_3
    mem2.sparsity_store(SparsityPattern(PatternKind.LEARNED, (1,) * 32), chars, 1.0, 0.5)
    assert mem2.sparsity_lookup(chars).kind is PatternKind.LEARNED
    with pytest.raises(ContractError):
        mem.sparsity_store(P2_4, chars, 1.5, 0.0)


def _busy_memory(seed):
    mem = AdaptiveMemory(capacity=50)
    rng = np.random.default_rng(seed)
    for i in range(300):
        kappa = float(10 ** rng.uniform(0, 6))
        et = ElementType.TET4 if i % 2 else ElementType.TRI3
        cfg = mem.memory_lookup(kappa, et)
        mem.record_outcome(mem.precision_key(kappa, et), float(rng.random() * 1e-3), 1.0, payload=cfg)
        if i % 32 == 31:
            mem.adapt_policy()
    for lt, m in (("conv", 3), ("readout", 12)):
        mem.record_utilization(lt, 1, (m, 8, 8, 8), mem.parallelism_policy(lt, rng=rng, epsilon=0.3), 0.7)
    mem.update_experience(LayerFeatures(2.0, 100), 5, 1e-3, 3.0)
    chars = analyze_sparsity(rng.normal(size=(4, 8)))
    mem.sparsity_store(P2_4, chars, 0.8, 0.5)
    return mem


def test_snapshot_roundtrip(tmp_path):
    mem = _busy_memory(1)
    mem.dump(tmp_path / "m.json")
    back = AdaptiveMemory.load(tmp_path / "m.json")
    assert back.snapshot() == mem.snapshot()
    # recency order survives: the LRU victim is the same
    k = PolicyKey(PolicyKind.PRECISION, 0, "tri3")
    assert list(back.long_term[PolicyKind.PRECISION]) == list(mem.long_term[PolicyKind.PRECISION])
    assert back.long_term[PolicyKind.PRECISION].put(k, None) == mem.long_term[PolicyKind.PRECISION].put(k, None)


@given(st.integers(0, 2 ** 32))
@settings(max_examples=10, deadline=None)
def test_determinism(seed):
    assert _busy_memory(seed).snapshot() == _busy_memory(seed).snapshot()


def test_tiers():
    assert PRECISION_TIERS == (MIXED, FP32X4, FP64X4)
