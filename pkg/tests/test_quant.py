import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tinyattn.oracle import ref_requantize
from tinyattn.quant import (ScaleOverflowError, attention_fold_shift, calibrate, dequantize, derive_requant,
                            quantize_array, quantize_bias, quantize_float, requantize)
from tinyattn.tensor import RequantParams


def test_requantize_examples():
    assert requantize(1000, RequantParams(1, 3)) == 125
    assert requantize(1000, RequantParams(1, 2)) == 127   # saturates
    assert requantize(-1000, RequantParams(1, 2)) == -128
    assert requantize(6, RequantParams(1, 2)) == 2        # 1.5 rounds up
    assert requantize(-6, RequantParams(1, 2)) == -1      # -1.5 rounds up too
    assert requantize(5, RequantParams(3, 0)) == 15


@given(st.integers(-2 ** 31, 2 ** 31 - 1), st.integers(1, 2 ** 16 - 1), st.integers(0, 31))
def test_requantize_matches_scalar_reference(acc, mul, div):
    rp = RequantParams(mul, div)
    assert requantize(acc, rp) == ref_requantize(acc, mul, div)
    assert int(requantize(np.array([acc]), rp)[0]) == ref_requantize(acc, mul, div)


def test_requantize_array_dtype_follows_bits():
    assert requantize(np.array([1]), RequantParams()).dtype == np.int8
    assert requantize(np.array([1000]), RequantParams(bits=16)).dtype == np.int32


def test_quantize_float_and_roundtrip():
    assert quantize_float(0.5, 4) == 8
    assert quantize_float(100.0, 4) == 127
    assert quantize_float(0.15625, 4) == 2   # 2.5 -> half to even
    with pytest.raises(ValueError):
        quantize_float(float("nan"), 0)
    x = np.array([0.25, -1.0, 3.0])
    assert np.array_equal(dequantize(quantize_array(x, 5), 5), x)


@given(st.floats(1e-3, 1e3))
def test_calibrate_picks_finest_covering_scale(m):
    n = calibrate(np.array([m, -m / 2])).chosen_exp
    assert 127 * 2.0 ** -n >= m
    assert 127 * 2.0 ** -(n + 1) < m


def test_calibrate_edge_cases():
    assert calibrate(np.zeros(3)).chosen_exp == 7
    assert calibrate(np.array([1.0])).chosen_exp == 6
    with pytest.raises(ValueError):
        calibrate(np.array([]))


def test_derive_requant():
    assert derive_requant(5, 6, 4) == RequantParams(1, 7)
    assert derive_requant(2, 1, 6) == RequantParams(8, 0)
    assert derive_requant(5, 5, 4, extra_shift=3) == RequantParams(1, 9)
    with pytest.raises(ScaleOverflowError):
        derive_requant(0, 0, 16)
    with pytest.raises(ScaleOverflowError):
        derive_requant(20, 20, 0)


@pytest.mark.parametrize("P", [1, 2, 3, 4, 8, 16, 32, 64])
def test_fold_shift_rounds_log2_sqrt(P):
    s = attention_fold_shift(P)
    assert abs(2.0 ** -s - 1 / math.sqrt(P)) <= min(abs(2.0 ** -(s + d) - 1 / math.sqrt(P)) for d in (-1, 1))


def test_quantize_bias_saturates_int16():
    b = quantize_bias([0.5, 1e6, -1e6], 4)
    assert b.dtype == np.int16
    assert list(b) == [8, 32767, -32768]
