import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from secir.numeric import (CARRIER_PRECISION_BITS, DEFAULT_CONFIG,
                           FixedPointConfig, in_share_range, is_on_grid,
                           truncate)


def scaled_integer_truncate(x: float, frac_bits: int) -> float:
    # independent oracle: exact integer floor on the scaled value
    return math.floor(x * 2 ** frac_bits) / 2 ** frac_bits


def test_truncate_zero_and_exact():
    assert truncate(0.0) == 0.0
    assert truncate(1.0) == 1.0


def test_truncate_frac4_example():
    cfg = FixedPointConfig(int_bits=12, frac_bits=4, delta=2, epsilon=8)
    expected = scaled_integer_truncate(0.15625, 4)
    assert expected == 0.125
    assert truncate(0.15625, cfg) == expected


def test_truncate_matches_scaled_integer_oracle():
    rng = np.random.default_rng(7)
    for x in rng.uniform(-100, 100, 500):
        assert truncate(float(x)) == scaled_integer_truncate(float(x), 16)


def test_truncate_array_matches_scalar():
    xs = np.array([0.15625, -0.3, 2.75, 1e-7])
    out = truncate(xs)
    for x, y in zip(xs, out):
        assert truncate(float(x)) == y


@given(st.floats(min_value=-200.0, max_value=200.0, allow_nan=False))
@settings(max_examples=300, deadline=None)
def test_truncate_idempotent(x):
    once = truncate(x)
    assert truncate(once) == once
    # floor property at carrier resolution: never above, within one grid step
    assert once <= x
    assert x - once <= 2.0 ** -16
    assert is_on_grid(once)


@given(st.floats(min_value=-50.0, max_value=50.0),
       st.floats(min_value=-50.0, max_value=50.0))
@settings(max_examples=300, deadline=None)
def test_truncate_sum_error_one_lsb(a, b):
    # at most one least-significant-bit discrepancy between the two orders
    delta = abs((truncate(a) + truncate(b)) - truncate(a + b))
    assert delta <= 2.0 ** -16


def test_in_share_range_examples():
    cfg = DEFAULT_CONFIG  # window (2^-8, 2^8)
    assert in_share_range(0.0, cfg) is True
    assert in_share_range(1.0, cfg) is True
    assert in_share_range(2.0 ** -9, cfg) is False
    assert in_share_range(2.0 ** 8, cfg) is False  # open interval
    assert in_share_range(-5.0, cfg) is True


def test_in_share_range_vectorized():
    out = in_share_range(np.array([0.0, 1.0, 2.0 ** -9]))
    assert out.tolist() == [True, True, False]


def test_share_product_representable():
    cfg = DEFAULT_CONFIG
    # any two in-range magnitudes multiply below the admissible bound
    top = cfg.share_hi * cfg.share_hi
    assert top <= 2.0 ** (cfg.int_bits / 2 + cfg.frac_bits)
    # and below the carrier's exact-integer ceiling at full product precision
    assert top * 2.0 ** (2 * cfg.frac_bits) <= 2.0 ** CARRIER_PRECISION_BITS


@given(st.floats(min_value=-200, max_value=200), st.floats(min_value=-200, max_value=200))
@settings(max_examples=200, deadline=None)
def test_on_grid_products_exact(a, b):
    # products of two grid values are exactly representable in the carrier
    ga, gb = truncate(a), truncate(b)
    prod = ga * gb
    assert prod == float(np.float64(ga) * np.float64(gb))


def test_config_validation():
    with pytest.raises(ValueError):
        FixedPointConfig(frac_bits=16, delta=4)  # delta below frac_bits/2
    with pytest.raises(ValueError):
        FixedPointConfig(int_bits=12, frac_bits=16, delta=8, epsilon=32)
    with pytest.raises(ValueError):
        FixedPointConfig(int_bits=24, frac_bits=20, delta=10, epsilon=26)
    with pytest.raises(ValueError):
        FixedPointConfig(eta=0.5)


def test_default_config_window():
    cfg = DEFAULT_CONFIG
    assert cfg.share_lo == 2.0 ** -8
    assert cfg.share_hi == 2.0 ** 8
    assert cfg.secret_hi == 2.0 ** 7
    assert cfg.resolution == 2.0 ** -16
