import math

import numpy as np
import pytest

from tinyattn import oracle
from tinyattn.fwsa import fuse_weights
from tinyattn.tensor import RequantParams


def rand_weights(rng, S, E, P, H):
    X = rng.normal(size=(S, E))
    Wq, Wk, Wv = (rng.normal(size=(H, E, P)) / math.sqrt(E) for _ in range(3))
    Wo = rng.normal(size=(H * P, E)) / math.sqrt(H * P)
    return X, Wq, Wk, Wv, Wo


def second_mhsa(X, Wq, Wk, Wv, Wo):
    """Batched formulation, written independently of the per-head loop."""
    P = Wq.shape[2]
    Q = np.einsum("se,hep->hsp", X, Wq)
    K = np.einsum("se,hep->hsp", X, Wk)
    V = np.einsum("se,hep->hsp", X, Wv)
    L = np.einsum("hsp,htp->hst", Q, K) / np.sqrt(P)
    A = np.exp(L - L.max(-1, keepdims=True))
    A /= A.sum(-1, keepdims=True)
    M = np.einsum("hst,htp->shp", A, V).reshape(X.shape[0], -1)
    return M @ Wo


def test_scalar_chain():
    X = np.array([[1.5]])
    Wq, Wk, Wv = np.array([[[2.0]]]), np.array([[[-1.0]]]), np.array([[[3.0]]])
    Wo = np.array([[0.5]])
    out = oracle.float_mhsa(X, Wq, Wk, Wv, Wo)
    assert out.shape == (1, 1)
    assert out[0, 0] == pytest.approx(1.5 * 3.0 * 0.5)


def test_dual_implementation():
    rng = np.random.default_rng(0)
    args = rand_weights(rng, 4, 8, 8, 2)
    assert np.abs(oracle.float_mhsa(*args) - second_mhsa(*args)).max() < 1e-6


def test_permutation_equivariance():
    rng = np.random.default_rng(1)
    X, *w = rand_weights(rng, 6, 8, 4, 2)
    perm = rng.permutation(6)
    out = oracle.float_mhsa(X, *w)
    assert np.allclose(oracle.float_mhsa(X[perm], *w), out[perm])


def test_fwsa_equals_mhsa_under_exact_fusion():
    rng = np.random.default_rng(2)
    X, Wq, Wk, Wv, Wo = rand_weights(rng, 7, 6, 3, 3)
    a = oracle.float_mhsa(X, Wq, Wk, Wv, Wo)
    b = oracle.float_fwsa(X, fuse_weights(Wq, Wk), Wv, Wo)
    assert np.abs(a - b).max() <= 1e-5


def test_zero_wstar_is_mean_pooling():
    rng = np.random.default_rng(3)
    X, _, _, Wv, Wo = rand_weights(rng, 5, 4, 2, 2)
    out = oracle.float_fwsa(X, np.zeros((2, 4, 4)), Wv, Wo)
    heads = [np.tile((X @ Wv[h]).mean(0), (5, 1)) for h in range(2)]
    assert np.allclose(out, np.concatenate(heads, 1) @ Wo)


def test_fwsa_small_case_by_hand():
    X = np.array([[1.0, 2.0], [-1.0, 0.5]])
    Ws = np.array([[[0.3, -0.2], [0.1, 0.4]]])
    t = 0.7
    maps = oracle.float_fwsa_maps(X, Ws, temperature=t)
    for i in range(2):
        logits = [t * sum(X[i, a] * Ws[0, a, b] * X[j, b] for a in range(2) for b in range(2)) for j in range(2)]
        e = [math.exp(v) for v in logits]
        assert maps[0, i] == pytest.approx([v / sum(e) for v in e])


def test_shape_mismatch():
    with pytest.raises(ValueError):
        oracle.float_mhsa(np.zeros((2, 3)), np.zeros((1, 4, 2)), np.zeros((1, 4, 2)), np.zeros((1, 4, 2)),
                          np.zeros((2, 4)))
    with pytest.raises(ValueError):
        oracle.float_fwsa(np.zeros((2, 3)), np.zeros((1, 4, 4)), np.zeros((1, 3, 2)), np.zeros((2, 3)))


def test_naive_gemm1_softmax_dominant_logit():
    Q = np.array([[[1], [1]]], dtype=np.int8)
    K = np.array([[[0], [100]]], dtype=np.int8)
    A = oracle.naive_int_kernel("gemm1_softmax", {"Q": Q, "K": K}, RequantParams(), logit_exp=0)
    assert A.shape == (2, 1, 2)
    assert A[0, 0].tolist() == [0, 127] and A[1, 0].tolist() == [0, 127]


def test_naive_irl_identity_and_determinism():
    rng = np.random.default_rng(4)
    X = rng.integers(-128, 128, size=(5, 3)).astype(np.int8)
    W = np.eye(3, dtype=np.int8).reshape(1, 3, 3)
    out = oracle.naive_int_kernel("irl", {"X": X, "W": W})
    assert np.array_equal(out[0], X)
    assert np.array_equal(out, oracle.naive_int_kernel("irl", {"X": X, "W": W}))
    with pytest.raises(ValueError):
        oracle.naive_int_kernel("conv", {})


def test_scalar_softmax_reference():
    assert oracle.ref_softmax_row([0, 0, 0, 0], 3) == [32] * 4
    assert oracle.ref_softmax_row([0, 0, 0], 3) == [43] * 3
    assert oracle.ref_requantize(7, 1, 1) == 4
