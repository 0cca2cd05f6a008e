import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgua.errors import ContractError
from mgua.precision import LADDER, PrecisionConfig, PrecisionLevel, mac_in, round_to
from oracles import bits_round

L = PrecisionLevel
levels = st.sampled_from(list(PrecisionLevel))
finite = st.floats(allow_nan=False, allow_infinity=False)
any_float = st.floats(allow_nan=True, allow_infinity=True)


def same_bits(a, b) -> bool:
    a, b = np.float64(a), np.float64(b)
    if np.isnan(a) and np.isnan(b):
        return True
    return a.view(np.uint64) == b.view(np.uint64)


@pytest.mark.parametrize("level,e,m", [(L.FP64, 11, 52), (L.FP32, 8, 23), (L.BF16, 8, 7), (L.FP16, 5, 10)])
def test_format_widths(level, e, m):
    assert (level.exponent_bits, level.mantissa_bits) == (e, m)


def test_ladder_order():
    assert LADDER == (L.BF16, L.FP32, L.FP64)
    assert L.FP16.rank == L.BF16.rank < L.FP32.rank < L.FP64.rank


def test_round_examples():
    assert round_to(1.0, L.BF16) == 1.0
    # 1/3 = 0.0101...b; bf16 keeps 8 significant bits -> 0.01010101|01.. rounds up
    assert round_to(1 / 3, L.BF16) == 0.333984375 == 171 / 512
    z = round_to(-0.0, L.FP16)
    assert z == 0 and math.copysign(1, z) < 0


def test_round_overflow_underflow_nan():
    assert round_to(1e10, L.FP16) == math.inf
    assert round_to(-1e40, L.FP32) == -math.inf
    assert round_to(L.FP16.min_subnormal / 2, L.FP16) == 0.0  # tie -> even (zero)
    assert round_to(L.FP16.min_subnormal * 0.51, L.FP16) == L.FP16.min_subnormal
    assert math.isnan(round_to(math.nan, L.BF16))
    assert round_to(65504.0, L.FP16) == 65504.0
    assert round_to(65520.0, L.FP16) == math.inf  # halfway to the next binade rounds to even -> overflow


def test_round_vectorized_matches_scalar():
    x = np.random.default_rng(0).normal(size=50) * 1e3
    vec = round_to(x, L.BF16)
    assert all(same_bits(v, round_to(float(s), L.BF16)) for v, s in zip(vec, x))


def test_mac_examples():
    assert mac_in(1.0, 1.0, 0.0, L.FP64) == 1.0
    assert mac_in(256.0, 1.0, 1.0, L.BF16) == 256.0
    rng = np.random.default_rng(1)
    for a, b, c in rng.normal(size=(200, 3)):
        assert mac_in(a, b, c, L.FP64) == a * b + c


def test_fused_mac_rounds_once():
    # (1 + 2^-7)^2 = 1 + 2^-6 + 2^-14; unfused drops the 2^-14 term before the add
    a = b = 1 + 2.0 ** -7
    c = -(1 + 2.0 ** -6)
    assert mac_in(a, b, c, L.BF16) == 0.0
    assert mac_in(a, b, c, L.BF16, fused=True) == 2.0 ** -14
    assert mac_in(0.1, 0.2, 0.3, L.FP64, fused=True) == float(Fraction(0.1) * Fraction(0.2) + Fraction(0.3))


def test_config_parse_and_invariant():
    cfg = PrecisionConfig.parse("bf16,bf16,fp32,fp32")
    assert cfg.as_tuple() == (L.BF16, L.BF16, L.FP32, L.FP32)
    assert cfg.to_token() == "bf16,bf16,fp32,fp32"
    with pytest.raises(ContractError):
        PrecisionConfig(L.FP64, L.FP64, L.BF16, L.FP32)
    with pytest.raises(ContractError):
        PrecisionLevel.parse("fp8")
    # fp16 storage under bf16 matrix ops is allowed (same ladder rank)
    PrecisionConfig(L.FP32, L.FP32, L.BF16, L.FP16)


@given(any_float, levels)
def test_idempotent(x, level):
    r = round_to(x, level)
    assert same_bits(round_to(r, level), r)


@given(finite, finite, levels)
def test_monotone(x, y, level):
    lo, hi = sorted((x, y))
    assert round_to(lo, level) <= round_to(hi, level)


@given(any_float)
def test_fp64_identity(x):
    assert same_bits(round_to(x, L.FP64), x)


@given(any_float, levels)
@settings(max_examples=300)
def test_agrees_with_bit_converter(x, level):
    assert same_bits(round_to(x, level), bits_round(np.array([x]), level.value)[0])


@given(finite, levels)
def test_nearest(x, level):
    """No representable neighbour is strictly closer than the rounded value."""
    r = round_to(x, level)
    if math.isinf(r):
        assert abs(x) >= level.max_finite
        return
    with np.errstate(over="ignore"):
        nbs = (np.nextafter(r, math.inf), np.nextafter(r, -math.inf))
    for nb in nbs:
        cand = round_to(float(nb), level)
        if math.isfinite(cand):
            assert abs(Fraction(r) - Fraction(x)) <= abs(Fraction(cand) - Fraction(x))
