"""Reference implementations used as ground truth.

Two families live here:

* float attention (classical and fused-weight), written as plain matrix
  algebra with no fusions or layout tricks;
* naive integer kernels. Accumulation is a whole-tensor ``einsum`` in
  int64 and every requantization, softmax, GELU and layer norm step is
  evaluated element by element with Python integers, so no code is
  shared with :mod:`tinyattn.kernels`.
"""

from __future__ import annotations

import math

import numpy as np

from .kernels import ERF_COEF, EXP_COEF, LN_FRAC_BITS, SOFTMAX_FRAC_BITS, SOFTMAX_OUT_EXP

# --------------------------------------------------------------------------
# float attention
# --------------------------------------------------------------------------


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _temperature(P: int, temperature: float | None) -> float:
    return 1.0 / math.sqrt(P) if temperature is None else temperature


def float_attention_maps(X, Wq, Wk, temperature=None, bq=None, bk=None) -> np.ndarray:
    """Per-head attention maps softmax(Q K^T * t), shape (H, S, S)."""
    X = np.asarray(X, dtype=np.float64)
    H, E, P = np.shape(Wq)
    t = _temperature(P, temperature)
    maps = []
    for h in range(H):
        q = X @ Wq[h]
        k = X @ Wk[h]
        if bq is not None:
            q = q + bq[h]
        if bk is not None:
            k = k + bk[h]
        maps.append(softmax_rows(q @ k.T * t))
    return np.stack(maps)


def _finish(X, maps, Wv, Wo, bv=None, bo=None):
    H = len(maps)
    heads = []
    for h in range(H):
        v = X @ Wv[h]
        if bv is not None:
            v = v + bv[h]
        heads.append(maps[h] @ v)
    out = np.concatenate(heads, axis=1) @ Wo
    if bo is not None:
        out = out + bo
    return out


def float_mhsa(X, Wq, Wk, Wv, Wo, temperature=None, biases=None) -> np.ndarray:
    """Classical multi-head self-attention.

    ``Wq, Wk, Wv`` are (H, E, P), ``Wo`` is (H*P, E). ``biases`` may hold
    ``bq, bk, bv`` of shape (H, P) and ``bo`` of shape (E,).
    """
    b = biases or {}
    X = np.asarray(X, dtype=np.float64)
    H, E, P = np.shape(Wq)
    if np.shape(X)[1] != E or np.shape(Wo) != (H * P, E):
        raise ValueError("shape mismatch between X and the weights")
    maps = float_attention_maps(X, Wq, Wk, temperature, b.get("bq"), b.get("bk"))
    return _finish(X, maps, Wv, Wo, b.get("bv"), b.get("bo"))


def float_fwsa_maps(X, Wstar, temperature=None, P=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    H, E, _ = np.shape(Wstar)
    if temperature is None:
        if P is None:
            raise ValueError("need P (or an explicit temperature) for the 1/sqrt(P) scaling")
        temperature = 1.0 / math.sqrt(P)
    return np.stack([softmax_rows(X @ Wstar[h] @ X.T * temperature) for h in range(H)])


def float_fwsa(X, Wstar, Wv, Wo, temperature=None, biases=None) -> np.ndarray:
    """Fused-weight attention: softmax(X W* X^T * t) replaces the Q/K path."""
    b = biases or {}
    X = np.asarray(X, dtype=np.float64)
    P = np.shape(Wv)[2]
    if np.shape(Wstar)[1:] != (X.shape[1], X.shape[1]):
        raise ValueError("W* must be (H, E, E)")
    maps = float_fwsa_maps(X, Wstar, temperature, P)
    return _finish(X, maps, Wv, Wo, b.get("bv"), b.get("bo"))


# --------------------------------------------------------------------------
# scalar integer primitives
# --------------------------------------------------------------------------


def ref_requantize(acc: int, mul: int, div: int, bits: int = 8) -> int:
    v = acc * mul
    if div > 0:
        v = (v + 2 ** (div - 1)) // 2 ** div
    return min(max(v, -2 ** (bits - 1)), 2 ** (bits - 1) - 1)


def _softmax_consts():
    a, b, c = EXP_COEF
    step = 2.0 ** -SOFTMAX_FRAC_BITS
    return math.floor(-math.log(2) / step), math.floor(b / a / step), math.floor(c / a / step / step)


def ref_softmax_row(row, in_exp: int) -> list[int]:
    """Integer softmax of one row, returned at scale 2^-7."""
    ln2, b, c = _softmax_consts()
    m = max(row)
    shift = SOFTMAX_FRAC_BITS - in_exp
    exps = []
    for v in row:
        d = v - m
        if shift >= 0:
            d = d * 2 ** shift
        else:
            d = (d + 2 ** (-shift - 1)) // 2 ** (-shift)
        d = max(d, 30 * ln2)
        q = d // ln2
        r = d - ln2 * q
        exps.append((r * (r + b) + c) // 2 ** q)
    total = sum(exps)
    one = 2 ** SOFTMAX_OUT_EXP
    return [min((e * one + total // 2) // total, 127) for e in exps]


def ref_gelu(x: int, in_exp: int, out_exp: int) -> int:
    a, bcoef = ERF_COEF
    s = 2.0 ** -in_exp
    s_erf = s / math.sqrt(2.0)
    b = math.floor(bcoef / s_erf)
    c = math.floor(1.0 / a / s_erf ** 2)
    erf_scale = a * s_erf ** 2
    one = math.floor(1.0 / erf_scale)
    target = -s * erf_scale / 2.0 * 2.0 ** out_exp
    shift = 31
    while shift > 0 and round(target * 2.0 ** shift) >= 2 ** 16:
        shift -= 1
    mul = round(target * 2.0 ** shift)
    sign = (x > 0) - (x < 0)
    y = sign * ((min(abs(x), -b) + b) ** 2 + c)
    return ref_requantize(-x * (y + one), mul, shift)


def ref_layernorm(row, gamma, beta, gamma_exp: int, out_exp: int) -> list[int]:
    n = len(row)
    F = LN_FRAC_BITS
    total = sum(row)
    dev = [n * v - total for v in row]
    ss = sum(d * d for d in dev)
    var = max(ss * 2 ** (2 * F) // n, n * n * 2 ** (2 * F))
    std = math.isqrt(var)
    out = []
    for d, g, bt in zip(dev, gamma, beta):
        norm = (d * 2 ** (2 * F) + std // 2) // std
        y = ref_requantize(g * norm, 1, gamma_exp + F - out_exp, bits=16) + bt
        out.append(min(max(y, -128), 127))
    return out


# --------------------------------------------------------------------------
# naive integer kernels
# --------------------------------------------------------------------------


def _requant_all(acc: np.ndarray, mul: int, div: int) -> np.ndarray:
    flat = [ref_requantize(int(v), mul, div) for v in acc.reshape(-1)]
    return np.array(flat, dtype=np.int64).reshape(acc.shape).astype(np.int8)


def _i64(a):
    return np.asarray(a, dtype=np.int64)


def naive_projection(X, W_hpe, mul, div, bias=None) -> np.ndarray:
    """Projection result in the mathematical (H, S, P) orientation."""
    acc = np.einsum("se,hpe->hsp", _i64(X), _i64(W_hpe))
    if bias is not None:
        H, P = np.shape(W_hpe)[:2]
        acc = acc + _i64(bias).reshape(H, 1, P)
    return _requant_all(acc, mul, div)


def naive_attention(Q_hsp, K_hsp, mul, div, logit_exp) -> np.ndarray:
    """Attention maps (H, Sq, Sk) from int8 Q and K."""
    acc = np.einsum("hsp,htp->hst", _i64(Q_hsp), _i64(K_hsp))
    logits = _requant_all(acc, mul, div).astype(np.int64)
    H, Sq, Sk = logits.shape
    out = np.empty((H, Sq, Sk), dtype=np.int8)
    for h in range(H):
        for s in range(Sq):
            out[h, s] = ref_softmax_row([int(v) for v in logits[h, s]], logit_exp)
    return out


def naive_context(A_hst, V_hsp, mul, div) -> np.ndarray:
    """Per-head A.V, shape (H, Sq, P)."""
    return _requant_all(np.einsum("hst,htp->hsp", _i64(A_hst), _i64(V_hsp)), mul, div)


def naive_output(M_hsp, Wo_e_hp, mul, div, bias=None) -> np.ndarray:
    H, S, P = np.shape(M_hsp)
    concat = np.transpose(_i64(M_hsp), (1, 0, 2)).reshape(S, H * P)
    acc = concat @ _i64(Wo_e_hp).T
    if bias is not None:
        acc = acc + _i64(bias)
    return _requant_all(acc, mul, div)


def naive_fwsa(X, Wstar, m2_mul, m2_div, lg_mul, lg_div, logit_exp, X_keys=None) -> np.ndarray:
    X_keys = X if X_keys is None else X_keys
    m2 = _requant_all(np.einsum("se,hef->hsf", _i64(X), _i64(Wstar)), m2_mul, m2_div)
    acc = np.einsum("hsf,tf->hst", _i64(m2), _i64(X_keys))
    logits = _requant_all(acc, lg_mul, lg_div).astype(np.int64)
    H, Sq, Sk = logits.shape
    out = np.empty((H, Sq, Sk), dtype=np.int8)
    for h in range(H):
        for s in range(Sq):
            out[h, s] = ref_softmax_row([int(v) for v in logits[h, s]], logit_exp)
    return out


KINDS = ("irl", "wrl", "gemm1_softmax", "gemm2", "out", "fwsa", "softmax", "gelu", "layernorm")


def naive_int_kernel(kind: str, inputs: dict, rp=None, **kw) -> np.ndarray:
    """Reference result of one optimized kernel, in that kernel's output layout.

    ``inputs`` holds raw int arrays in the optimized kernels' storage
    orders (projection weights (H, P, E), V in HPS, A in SHS, ...).
    """
    mul, div = (rp.eps_mul, rp.eps_div) if rp is not None else (1, 0)
    bias = None if rp is None or rp.bias is None else rp.bias
    if kind == "irl":
        return naive_projection(inputs["X"], inputs["W"], mul, div, bias)
    if kind == "wrl":
        return np.transpose(naive_projection(inputs["X"], inputs["W"], mul, div, bias), (0, 2, 1)).copy()
    if kind == "gemm1_softmax":
        A = naive_attention(inputs["Q"], inputs["K"], mul, div, kw["logit_exp"])
        return np.transpose(A, (1, 0, 2)).copy()
    if kind == "gemm2":
        A = np.transpose(_i64(inputs["A"]), (1, 0, 2))
        V = np.transpose(_i64(inputs["V"]), (0, 2, 1))
        return np.transpose(naive_context(A, V, mul, div), (1, 0, 2)).copy()
    if kind == "out":
        M = np.transpose(_i64(inputs["M1"]), (1, 0, 2))
        return naive_output(M, inputs["W"], mul, div, bias)
    if kind == "fwsa":
        rp2 = kw["rp_logits"]
        A = naive_fwsa(inputs["X"], inputs["W_star"], mul, div, rp2.eps_mul, rp2.eps_div,
                       kw["logit_exp"], inputs.get("X_keys"))
        return np.transpose(A, (1, 0, 2)).copy()
    if kind == "softmax":
        rows = _i64(inputs["logits"])
        flat = rows.reshape(-1, rows.shape[-1])
        out = [ref_softmax_row([int(v) for v in r], kw["in_exp"]) for r in flat]
        return np.array(out, dtype=np.int8).reshape(rows.shape)
    if kind == "gelu":
        x = _i64(inputs["x"])
        out_exp = kw.get("out_exp", kw["in_exp"])
        vals = [ref_gelu(int(v), kw["in_exp"], out_exp) for v in x.reshape(-1)]
        return np.array(vals, dtype=np.int8).reshape(x.shape)
    if kind == "layernorm":
        x = _i64(inputs["x"])
        flat = x.reshape(-1, x.shape[-1])
        out = [ref_layernorm([int(v) for v in r], [int(g) for g in inputs["gamma"]],
                             [int(b) for b in inputs["beta"]], kw["gamma_exp"], kw["out_exp"])
               for r in flat]
        return np.array(out, dtype=np.int8).reshape(x.shape)
    raise ValueError(f"unknown kernel kind {kind!r}; expected one of {KINDS}")
