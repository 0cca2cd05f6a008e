import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from mgua.errors import ContractError, FormatError
from mgua.memory import AdaptiveMemory
from mgua.snn import (
    ACC_MAX, DEFAULT_SYSTOLIC, LayerSpec, SystolicConfig, bit_serial_matmul, candidate_configs,
    decompose_multibit, pack_spikes, predicted_cycles, predicted_utilization, quantize, run_layer,
    run_snn_stage, shift_add_reconstruct, spikes_from_document, systolic_matmul, unpack_spikes,
)
from mgua.synthetic import heterogeneous_layer_suite
from oracles import closed_form_utilization, naive_int_matmul

tiles = st.builds(lambda t: SystolicConfig(*t),
                  st.sampled_from([c.tile for c in candidate_configs()]))


def test_candidates():
    cands = candidate_configs()
    assert all(c.pe_count <= 256 for c in cands)
    assert SystolicConfig(16, 16, 1, 1) in cands and DEFAULT_SYSTOLIC in cands
    assert len(cands) == len(set(cands))
    with pytest.raises(ContractError):
        SystolicConfig(16, 16, 2, 1)
    with pytest.raises(ContractError):
        SystolicConfig(3, 4, 4, 4)


def test_quantize_example():
    q = quantize(np.array([-1.0, 0.5, 0.25, 0.0]), 2)
    assert q.scale == pytest.approx(1 / 3)
    assert q.ints.tolist() == [3, 2, 1, 0]  # 1.5 rounds half to even
    assert q.negative.tolist() == [True, False, False, False]
    assert q.signed_ints.tolist() == [-3, 2, 1, 0]
    with pytest.raises(ContractError):
        quantize(np.ones(2), 9)
    with pytest.raises(ContractError):
        quantize(np.array([np.nan]), 4)


def test_decompose_example():
    planes = decompose_multibit(np.array([5, 2, 7, 0]), 3)
    assert [p.tolist() for p in planes] == [[1, 0, 1, 0], [0, 1, 1, 0], [1, 0, 1, 0]]
    with pytest.raises(ContractError):
        decompose_multibit(np.array([8]), 3)


def test_systolic_utilization_example():
    # 6 output channels on an 8-wide M axis: 6/8 of the PEs do useful work
    rng = np.random.default_rng(0)
    spikes = rng.integers(0, 2, (4, 4, 4))
    w = rng.integers(-3, 4, (6, 4))
    out, trace = systolic_matmul(spikes, w, SystolicConfig(8, 4, 4, 2))
    assert trace.utilization == pytest.approx(6 / 8)
    assert trace.cycles == 1 * 1 * 1 * 2
    assert trace.macs == 6 * 4 * 4 * 4
    np.testing.assert_array_equal(out, naive_int_matmul(spikes, w))


@given(st.tuples(*[st.integers(1, 20)] * 4), tiles, st.integers(0, 2 ** 16))
@settings(max_examples=60, deadline=None)
def test_systolic_matches_oracle_and_closed_form(dims, cfg, seed):
    rng = np.random.default_rng(seed)
    M, V, N, S = dims
    spikes = rng.integers(0, 2, (V, N, S))
    w = rng.integers(-7, 8, (M, V))
    out, trace = systolic_matmul(spikes, w, cfg)
    np.testing.assert_array_equal(out, naive_int_matmul(spikes, w))
    assert trace.utilization == pytest.approx(closed_form_utilization(dims, cfg.tile), rel=1e-12)
    assert trace.utilization == pytest.approx(float(predicted_utilization(dims, cfg.tile)), rel=1e-12)
    assert trace.cycles == int(predicted_cycles(dims, cfg.tile))
    assert 0 < trace.utilization <= 1


@given(st.tuples(*[st.integers(1, 20)] * 4), st.integers(0, 2 ** 16))
@settings(max_examples=30, deadline=None)
def test_result_independent_of_tiling(dims, seed):
    rng = np.random.default_rng(seed)
    M, V, N, S = dims
    spikes = rng.integers(0, 2, (V, N, S))
    w = rng.integers(-7, 8, (M, V))
    ref, _ = systolic_matmul(spikes, w, DEFAULT_SYSTOLIC)
    for t in rng.choice(len(candidate_configs()), 5):
        out, _ = systolic_matmul(spikes, w, candidate_configs()[t])
        np.testing.assert_array_equal(out, ref)


@given(st.integers(1, 40), st.sampled_from([1, 2, 4, 8, 16]))
def test_cycles_monotone_in_tile(D, t):
    dims = (D, 5, 5, 5)
    smaller = (max(t // 2, 1), 4, 4, 4)
    assert predicted_cycles(dims, (t, 4, 4, 4)) <= predicted_cycles(dims, smaller)


def test_shift_add_example_and_saturation():
    acc, sat = shift_add_reconstruct([np.array([1, 0]), np.array([1, 1]), np.array([0, 1])])
    assert acc.tolist() == [3, 6] and not sat
    acc, sat = shift_add_reconstruct([np.array([ACC_MAX]), np.array([1])])
    assert sat and acc.tolist() == [ACC_MAX]
    acc, sat = shift_add_reconstruct([np.array([-ACC_MAX]), np.array([-ACC_MAX])])
    assert sat and acc.tolist() == [-(2 ** 31)]


@given(st.integers(1, 8), st.integers(0, 2 ** 16))
@settings(max_examples=40, deadline=None)
def test_bit_serial_exact(b, seed):
    rng = np.random.default_rng(seed)
    ints = rng.integers(0, 2 ** b, (5, 3, 4))
    w = rng.integers(-8, 9, (7, 5))
    out, trace, sat = bit_serial_matmul(ints, w, b, DEFAULT_SYSTOLIC)
    assert not sat
    np.testing.assert_array_equal(out, naive_int_matmul(ints, w))
    assert trace.macs == b * 7 * 5 * 3 * 4


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-1e6, 1e6)),
       st.integers(1, 8))
@settings(max_examples=60, deadline=None)
def test_quantization_error_bound(x, b):
    q = quantize(x, b)
    assert q.ints.max() <= 2 ** b - 1 and q.ints.min() >= 0
    assert np.all(np.abs(q.dequantize() - x) <= q.scale / 2 * (1 + 1e-12))
    planes = decompose_multibit(q.ints, b)
    assert all(set(np.unique(p)) <= {0, 1} for p in planes)
    assert np.array_equal(sum(p.astype(np.int64) << j for j, p in enumerate(planes)), q.ints)


def test_run_layer_identity_and_zero():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 3, 2))
    ident = run_layer(x, LayerSpec("linear", np.eye(4, dtype=int), 2), 8, DEFAULT_SYSTOLIC)
    np.testing.assert_allclose(ident.output, quantize(x, 8).dequantize(), rtol=0, atol=1e-12)
    assert ident.error <= 2.0 ** -8
    zero = run_layer(x, LayerSpec("conv", np.zeros((2, 4), dtype=int), 4), 4, DEFAULT_SYSTOLIC)
    assert not zero.output.any() and zero.error == 0.0
    with pytest.raises(ContractError):
        run_layer(x, LayerSpec("conv", np.zeros((2, 5), dtype=int), 4), 4, DEFAULT_SYSTOLIC)
    with pytest.raises(ContractError):
        LayerSpec("attention", np.zeros((1, 1)))


def test_layer_error_shrinks_with_bits():
    x, layers = heterogeneous_layer_suite(0)
    errs = [run_layer(x, layers[0], b, DEFAULT_SYSTOLIC).error for b in (2, 4, 8)]
    assert errs[0] > errs[1] > errs[2]


def test_stage_and_spike_roundtrip():
    x, layers = heterogeneous_layer_suite(1)
    doc, results = run_snn_stage(x, layers, AdaptiveMemory(), np.random.default_rng(0), epsilon=0.1)
    assert len(results) == len(layers)
    doc = json.loads(json.dumps(doc))
    q = spikes_from_document(doc)
    assert q.ints.shape == results[-1].output.shape
    np.testing.assert_allclose(q.dequantize(), quantize(results[-1].output, q.b).dequantize())
    cfg = SystolicConfig(doc["metadata"]["M"], doc["metadata"]["V"], doc["metadata"]["N"], doc["metadata"]["S"])
    blob = pack_spikes(q, cfg)
    q2, cfg2 = unpack_spikes(blob)
    assert cfg2 == cfg and q2.b == q.b and q2.scale == q.scale
    np.testing.assert_array_equal(q2.signed_ints, q.signed_ints)
    assert pack_spikes(q2, cfg2) == blob
    with pytest.raises(FormatError):
        unpack_spikes(blob[:-1])
    with pytest.raises(FormatError):
        unpack_spikes(b"XXXX" + blob[4:])


def test_stage_deterministic():
    runs = []
    for _ in range(2):
        x, layers = heterogeneous_layer_suite(2)
        mem = AdaptiveMemory()
        doc, _ = run_snn_stage(x, layers, mem, np.random.default_rng(9), epsilon=0.2, batch_size=2)
        runs.append((json.dumps(doc, sort_keys=True), mem.snapshot()))
    assert runs[0] == runs[1]


def test_fixed_parallelism_honoured():
    x, layers = heterogeneous_layer_suite(0)
    _, results = run_snn_stage(x, layers, AdaptiveMemory(), np.random.default_rng(0),
                               fixed_parallelism=DEFAULT_SYSTOLIC)
    assert {r.config for r in results} == {DEFAULT_SYSTOLIC}
    assert all(1 <= r.b <= 8 for r in results)


def test_worked_examples():
    q = quantize(np.array([0.0, 1.5, 3.0]), 2)
    assert q.scale == 1.0 and q.ints.tolist() == [0, 2, 3]
    z = quantize(np.zeros(4), 5)
    assert z.scale == 1.0 and not z.ints.any()
    assert [p.tolist() for p in decompose_multibit(np.array([5]), 3)] == [[1], [0], [1]]

    out, _ = systolic_matmul(np.ones((3, 2, 2), dtype=int), np.ones((1, 3), dtype=int), DEFAULT_SYSTOLIC)
    assert np.all(out == 3)
    # six output channels on a 4-wide M axis: tiles occupied 4/4 and 2/4
    _, trace = systolic_matmul(np.ones((4, 4, 4), dtype=int), np.ones((6, 4), dtype=int), DEFAULT_SYSTOLIC)
    assert trace.utilization == 0.75

    acc, sat = shift_add_reconstruct([np.array([[5]]), np.array([[5]])])
    assert acc.tolist() == [[15]] and not sat
    acc, _ = shift_add_reconstruct([np.array([7, -2])])
    assert acc.tolist() == [7, -2]
