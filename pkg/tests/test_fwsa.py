import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tinyattn.fwsa import (count_biases, count_block_ops, count_core_ops, count_params, cost_report, fuse_weights,
                           fwsa_beneficial, op_threshold)
from tinyattn.tensor import ECG, EEG, TR, AttnDims, ShapeError


def test_fuse_weights_per_head():
    rng = np.random.default_rng(0)
    Wq, Wk = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    Ws = fuse_weights(Wq, Wk)
    assert Ws.shape == (2, 3, 3)
    assert np.allclose(Ws[1], Wq[1] @ Wk[1].T)
    with pytest.raises(ShapeError):
        fuse_weights(Wq, Wk[:, :, :2])


def test_block_ops_values():
    assert count_block_ops(EEG) == (6_013_440, 5_349_888)
    assert count_block_ops(TR) == (176_640, 135_680)
    assert count_block_ops(ECG) == (206_976, 796_224)
    assert count_core_ops(EEG) == (3_006_720, 2_343_168)


@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 64), st.integers(1, 8))
def test_block_ops_decompose(S, E, P, H):
    d = AttnDims(S, E, P, H)
    core_m, core_f = count_core_ops(d)
    shared = H * S * P * E + H * S * S * P + S * H * P * E   # V projection, A.V, output projection
    assert count_block_ops(d) == (core_m + shared, core_f + shared)


def test_params_and_biases():
    assert count_params(EEG) == (16_384, 8_192, 32_768, 24_576)
    assert count_biases(EEG) == (3 * 256 + 32, 256 + 32)


def test_threshold_crossover_s32():
    assert op_threshold(32, 32) == pytest.approx(51.78, abs=0.01)
    flags = {E: fwsa_beneficial(AttnDims(32, E, 32, 1)) for E in range(48, 68)}
    assert flags[51][0] and not flags[52][0]
    assert flags[63][1] and not flags[64][1]


@given(st.integers(1, 128), st.integers(1, 128), st.integers(1, 128))
def test_exact_flag_agrees_with_float_threshold(S, E, P):
    t = op_threshold(S, P)
    if abs(E - t) > 1e-6:
        assert fwsa_beneficial(AttnDims(S, E, P, 1))[0] == (E < t)


def test_flag_agrees_with_op_counts():
    for S, E, P in [(32, 40, 32), (32, 60, 32), (66, 16, 2), (5, 32, 32), (81, 32, 32)]:
        d = AttnDims(S, E, P, 4)
        core_m, core_f = count_core_ops(d)
        assert fwsa_beneficial(d)[0] == (core_f < core_m)


def test_cost_report():
    r = cost_report(EEG)
    assert r.mac_change == pytest.approx(-0.1103, abs=1e-4)
    assert r.param_change == pytest.approx(-0.25)
    assert cost_report(ECG).op_beneficial is False
    assert math.isclose(cost_report(TR).mac_change, -0.2319, abs_tol=1e-4)
