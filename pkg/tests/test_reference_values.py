"""Design constants that are fixed by the reference accelerator description, not tuned here."""

import numpy as np

from mgua import memory, snn, sparse
from mgua.fem import KAPPA_SOFT_LIMIT, ElementType, quadrature
from mgua.memory import AdaptiveMemory
from mgua.snn import LayerFeatures
from mgua.synthetic import generate_synthetic_mesh


def test_default_array_is_4x4x4x4():
    assert snn.DEFAULT_SYSTOLIC.tile == (4, 4, 4, 4)
    assert AdaptiveMemory().parallelism_policy("readout").tile == (4, 4, 4, 4)
    assert snn.PE_BUDGET == 4 ** 4


def test_memory_capacities():
    assert memory.LONG_TERM_CAPACITY == 10000
    assert memory.SHORT_TERM_CAPACITY == 100


def test_bit_width_cap():
    assert snn.MAX_BITS == 8
    assert AdaptiveMemory().predict_bitwidth(LayerFeatures(1.0, 1)) == 8


def test_minimum_density():
    assert sparse.MIN_DENSITY == 0.10


def test_condition_number_threshold():
    mem = AdaptiveMemory()
    assert KAPPA_SOFT_LIMIT == 1000
    assert mem.memory_lookup(999.0, ElementType.TET4) != mem.memory_lookup(1000.0, ElementType.TET4)


def test_benchmark_kappa_range_reachable():
    _, kappas = generate_synthetic_mesh(50, 1e2, 1e6, "hex8", seed=0)
    assert kappas.min() >= 1e2 * 0.95 and kappas.max() <= 1e6 * 1.05


def test_hex_quadrature_in_range():
    pts, w = quadrature(ElementType.HEX8)
    assert 8 <= len(w) <= 27
    assert np.isclose(w.sum(), 8.0)
