"""Integer attention kernels.

Every kernel consumes int8 tensors, accumulates in int32 (held in int64
arrays) and requantizes on the fly. Output tiles are produced in 4x2
register windows (4 rows x 2 features, 8 live accumulators); rows or
features left over when an extent is not a multiple of the window are
produced by scalar remainder loops.

Weight storage:

* projection weights ``(H, P, E)`` -- one row per output feature,
  contiguous along the reduction axis E;
* output projection ``(E, H*P)``;
* fused weight ``(H, E, E')`` with ``W*[h] = Wq[h] @ Wk[h].T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .quant import requantize
from .tensor import INT8_MAX, Layout, QuantTensor, RequantParams, ShapeError

ROW_WINDOW = 4
COL_WINDOW = 2

SOFTMAX_OUT_EXP = 7
SOFTMAX_FRAC_BITS = 10

# second-order exp polynomial on [-ln2, 0]: 0.35815147 x^2 + 0.96963238 x + 1
EXP_COEF = (0.35815147, 0.96963238, 1.0)
# erf polynomial: sign(x) * (a * (min(|x|, -b) + b)^2 + 1)
ERF_COEF = (-0.2888, -1.769)

LN_FRAC_BITS = 10


@dataclass(frozen=True)
class LinearWeights:
    """int8 weight tensor plus its requantization (and 16-bit bias)."""

    w: QuantTensor
    rp: RequantParams

    def head_slice(self, h0: int, h1: int, p0: int = 0, p1: int | None = None) -> "LinearWeights":
        """Weights for heads [h0, h1) and features [p0, p1) of a projection."""
        H, P, E = self.w.shape
        p1 = P if p1 is None else p1
        w = QuantTensor(self.w.data[h0:h1, p0:p1], Layout.HPE, self.w.scale_exp)
        if self.rp.bias is None:
            return LinearWeights(w, self.rp)
        bias = self.rp.bias.reshape(H, P)[h0:h1, p0:p1].reshape(-1)
        return LinearWeights(w, RequantParams(self.rp.eps_mul, self.rp.eps_div, bias, self.rp.bits))

    def row_slice(self, e0: int, e1: int) -> "LinearWeights":
        """Output-projection rows [e0, e1)."""
        w = QuantTensor(self.w.data[e0:e1], Layout.E_HP, self.w.scale_exp)
        return LinearWeights(w, self.rp.with_bias_slice(e0, e1))


def _blocks(n: int, step: int):
    """Full windows of ``step`` followed by single-element remainders."""
    full = n - n % step
    for i in range(0, full, step):
        yield i, i + step
    for i in range(full, n):
        yield i, i + 1


def _i64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.int64)


def _check(cond: bool, msg: str):
    if not cond:
        raise ShapeError(msg)


# --------------------------------------------------------------------------
# linear projections
# --------------------------------------------------------------------------

def _projection_operands(X: QuantTensor, w: LinearWeights):
    _check(X.layout in (Layout.SE, Layout.SE_out), f"input layout must be SE, got {X.layout.name}")
    _check(w.w.layout is Layout.HPE, "projection weights must be stored (H, P, E)")
    S, E = X.shape
    H, P, Ew = w.w.shape
    _check(E == Ew, f"reduction mismatch: X has E={E}, weights have E={Ew}")
    bias = w.rp.bias_or_zeros(H * P).reshape(H, P)
    return S, E, H, P, _i64(X.data), _i64(w.w.data), bias


def linear_irl(X: QuantTensor, w: LinearWeights, out_exp: int) -> QuantTensor:
    """Input-reuse linear: loop order H -> S -> P -> E, output in HSP.

    Used for Q and K so the following GEMM reads query/key rows
    contiguously.
    """
    S, E, H, P, x, wt, bias = _projection_operands(X, w)
    out = np.empty((H, S, P), dtype=np.int8)
    for h in range(H):
        wh = wt[h]
        for s0, s1 in _blocks(S, ROW_WINDOW):
            xs = x[s0:s1]
            for p0, p1 in _blocks(P, COL_WINDOW):
                acc = xs @ wh[p0:p1].T + bias[h, p0:p1]
                out[h, s0:s1, p0:p1] = requantize(acc, w.rp)
    return QuantTensor(out, Layout.HSP, out_exp)


def linear_wrl(X: QuantTensor, w: LinearWeights, out_exp: int) -> QuantTensor:
    """Weight-reuse linear: loop order H -> P -> S -> E, output in HPS.

    Each weight row is applied to the whole input before moving on, and
    the result is the per-head transpose of :func:`linear_irl`.
    """
    S, E, H, P, x, wt, bias = _projection_operands(X, w)
    out = np.empty((H, P, S), dtype=np.int8)
    for h in range(H):
        wh = wt[h]
        for p0, p1 in _blocks(P, COL_WINDOW):
            wp = wh[p0:p1]
            bp = bias[h, p0:p1, None]
            for s0, s1 in _blocks(S, ROW_WINDOW):
                acc = wp @ x[s0:s1].T + bp
                out[h, p0:p1, s0:s1] = requantize(acc, w.rp)
    return QuantTensor(out, Layout.HPS, out_exp)


def linear_out(M1: QuantTensor, w: LinearWeights, out_exp: int) -> QuantTensor:
    """Output projection, loop order S -> E -> (H*P).

    Reads M1 rows as one contiguous H*P vector, so heads are never
    concatenated explicitly.
    """
    _check(M1.layout is Layout.SHP, f"M1 must be SHP, got {M1.layout.name}")
    _check(w.w.layout is Layout.E_HP, "output weights must be stored (E, H*P)")
    S, H, P = M1.shape
    E, HP = w.w.shape
    _check(HP == H * P, f"reduction mismatch: M1 has H*P={H * P}, weights {HP}")
    m = _i64(M1.data).reshape(S, HP)
    wt = _i64(w.w.data)
    bias = w.rp.bias_or_zeros(E)
    out = np.empty((S, E), dtype=np.int8)
    for s0, s1 in _blocks(S, ROW_WINDOW):
        ms = m[s0:s1]
        for e0, e1 in _blocks(E, COL_WINDOW):
            acc = ms @ wt[e0:e1].T + bias[e0:e1]
            out[s0:s1, e0:e1] = requantize(acc, w.rp)
    return QuantTensor(out, Layout.SE_out, out_exp)


# --------------------------------------------------------------------------
# attention GEMMs
# --------------------------------------------------------------------------

def matmul_softmax(Q: QuantTensor, K: QuantTensor, rp: RequantParams, logit_exp: int) -> QuantTensor:
    """Q.K^T fused with the integer softmax, loop order S -> H -> S'.

    ``Q`` is (H, Sq, P) and ``K`` is (H, Sk, P), both HSP: the dot product
    contracts a query row with a key row, so K^T is never formed. Each
    finished logit row is requantized to ``logit_exp`` (``rp`` carries the
    folded temperature shift) and normalized before the next one starts.
    Output is SHS: (Sq, H, Sk) at scale 2^-7.
    """
    _check(Q.layout is Layout.HSP and K.layout is Layout.HSP, "Q and K must be HSP")
    H, Sq, P = Q.shape
    Hk, Sk, Pk = K.shape
    _check(H == Hk and P == Pk, f"Q {Q.shape} and K {K.shape} disagree")
    q = _i64(Q.data)
    k = _i64(K.data)
    out = np.empty((Sq, H, Sk), dtype=np.int8)
    logits = np.empty((ROW_WINDOW, Sk), dtype=np.int64)
    for s0, s1 in _blocks(Sq, ROW_WINDOW):
        n = s1 - s0
        for h in range(H):
            qs = q[h, s0:s1]
            for t0, t1 in _blocks(Sk, COL_WINDOW):
                logits[:n, t0:t1] = requantize(qs @ k[h, t0:t1].T, rp)
            out[s0:s1, h, :] = int_softmax(logits[:n], logit_exp)
    return QuantTensor(out, Layout.SHS, SOFTMAX_OUT_EXP)


def matmul_m2(A: QuantTensor, V: QuantTensor, rp: RequantParams, out_exp: int) -> QuantTensor:
    """A.V with loop order S -> H -> P, reducing over the key axis.

    ``A`` is SHS (Sq, H, Sk) and ``V`` is HPS (H, P, Sk), so both operands
    are streamed along their last axis. Output M1 is SHP (Sq, H, P).
    """
    _check(A.layout is Layout.SHS and V.layout is Layout.HPS, "A must be SHS and V HPS")
    Sq, H, Sk = A.shape
    Hv, P, Sv = V.shape
    _check(H == Hv and Sk == Sv, f"A {A.shape} and V {V.shape} disagree")
    a = _i64(A.data)
    v = _i64(V.data)
    out = np.empty((Sq, H, P), dtype=np.int8)
    for s0, s1 in _blocks(Sq, ROW_WINDOW):
        for h in range(H):
            ah = a[s0:s1, h]
            for p0, p1 in _blocks(P, COL_WINDOW):
                out[s0:s1, h, p0:p1] = requantize(ah @ v[h, p0:p1].T, rp)
    return QuantTensor(out, Layout.SHP, out_exp)


def fwsa_fused(X: QuantTensor, w_star: QuantTensor, rp_m2: RequantParams, m2_exp: int,
               rp_logits: RequantParams, logit_exp: int,
               X_keys: QuantTensor | None = None) -> QuantTensor:
    """Fused-weight attention map softmax(X W* X^T).

    Stage one (H -> S -> E) builds M2 = X W* in HSE; stage two reuses the
    matmul-softmax order (S -> H -> S') with E as the reduction axis.
    ``X`` holds the query rows; ``X_keys`` (default ``X``) the key rows.
    """
    X_keys = X if X_keys is None else X_keys
    _check(X.layout in (Layout.SE, Layout.SE_out), "X must be SE")
    _check(w_star.layout is Layout.HEE, "W* must be stored (H, E, E')")
    Sq, E = X.shape
    Sk, Ek = X_keys.shape
    H, E1, E2 = w_star.shape
    _check(E == Ek == E1 == E2, f"embedding mismatch: X {X.shape}, keys {X_keys.shape}, W* {w_star.shape}")
    x = _i64(X.data)
    xk = _i64(X_keys.data)
    ws = _i64(w_star.data)

    m2 = np.empty((H, Sq, E), dtype=np.int8)
    for h in range(H):
        wh = ws[h]
        for s0, s1 in _blocks(Sq, ROW_WINDOW):
            xs = x[s0:s1]
            for e0, e1 in _blocks(E, COL_WINDOW):
                m2[h, s0:s1, e0:e1] = requantize(xs @ wh[:, e0:e1], rp_m2)
    M2 = QuantTensor(m2, Layout.HSE, m2_exp)

    m = _i64(M2.data)
    out = np.empty((Sq, H, Sk), dtype=np.int8)
    logits = np.empty((ROW_WINDOW, Sk), dtype=np.int64)
    for s0, s1 in _blocks(Sq, ROW_WINDOW):
        n = s1 - s0
        for h in range(H):
            ms = m[h, s0:s1]
            for t0, t1 in _blocks(Sk, COL_WINDOW):
                logits[:n, t0:t1] = requantize(ms @ xk[t0:t1].T, rp_logits)
            out[s0:s1, h, :] = int_softmax(logits[:n], logit_exp)
    return QuantTensor(out, Layout.SHS, SOFTMAX_OUT_EXP)


# --------------------------------------------------------------------------
# integer non-linearities
# --------------------------------------------------------------------------

def _exp_constants():
    a, b, c = EXP_COEF
    scale = 2.0 ** -SOFTMAX_FRAC_BITS
    ln2_int = math.floor(-math.log(2) / scale)
    b_int = math.floor(b / a / scale)
    c_int = math.floor(c / a / scale ** 2)
    return ln2_int, b_int, c_int


EXP_LN2_INT, EXP_B_INT, EXP_C_INT = _exp_constants()
EXP_MAX_SHIFT = 30


def int_softmax(logits, in_scale_exp: int) -> np.ndarray:
    """Integer softmax along the last axis, emitted as int8 at scale 2^-7.

    The max-subtracted logits are brought to 10 fractional bits, split as
    ``r + q*(-ln2)`` and ``exp`` is evaluated as a second-order polynomial
    in ``r`` shifted right by ``q``. Normalization rounds to nearest, so a
    row of S equal logits yields round(128/S) everywhere.
    """
    x = _i64(logits)
    _check(x.ndim >= 1 and x.shape[-1] >= 1, "softmax row must be non-empty")
    x = x - x.max(axis=-1, keepdims=True)
    shift = SOFTMAX_FRAC_BITS - in_scale_exp
    if shift >= 0:
        x = x * (1 << shift)
    else:
        x = (x + (1 << (-shift - 1))) >> (-shift)
    x = np.maximum(x, EXP_MAX_SHIFT * EXP_LN2_INT)
    q = x // EXP_LN2_INT
    r = x - EXP_LN2_INT * q
    z = r * (r + EXP_B_INT) + EXP_C_INT
    e = z >> q
    total = e.sum(axis=-1, keepdims=True)
    out = (e * (1 << SOFTMAX_OUT_EXP) + total // 2) // total
    return np.minimum(out, INT8_MAX).astype(np.int8)


def _fixed_point(value: float, max_shift: int = 31) -> tuple[int, int]:
    """Approximate a positive real by ``mul / 2**shift`` with a 16-bit mul."""
    if value <= 0:
        raise ValueError("fixed-point scale must be positive")
    shift = max_shift
    while shift > 0 and round(value * 2.0 ** shift) >= 1 << 16:
        shift -= 1
    mul = round(value * 2.0 ** shift)
    if mul >= 1 << 16:
        raise ValueError(f"scale {value} too large for a 16-bit multiplier")
    return mul, shift


def gelu_constants(in_exp: int, out_exp: int) -> dict:
    """Integer constants of the polynomial GELU for a given input scale."""
    a, b = ERF_COEF
    s = 2.0 ** -in_exp
    s_erf = s / math.sqrt(2.0)
    b_int = math.floor(b / s_erf)
    c_int = math.floor(1.0 / a / s_erf ** 2)
    erf_scale = a * s_erf ** 2  # negative
    one_int = math.floor(1.0 / erf_scale)
    # gelu = x * (erf + 1) * s * erf_scale / 2; flip sign to get a positive scale
    out_scale = -s * erf_scale / 2.0
    mul, shift = _fixed_point(out_scale * 2.0 ** out_exp)
    return {"b_int": b_int, "c_int": c_int, "one_int": one_int, "mul": mul, "shift": shift}


def i_gelu(x, in_exp: int, out_exp: int | None = None) -> np.ndarray:
    """Integer GELU ``x * (1 + erf(x / sqrt 2)) / 2`` on int8 input."""
    out_exp = in_exp if out_exp is None else out_exp
    k = gelu_constants(in_exp, out_exp)
    xi = _i64(x)
    sign = np.sign(xi)
    mag = np.minimum(np.abs(xi), -k["b_int"])
    y = sign * ((mag + k["b_int"]) ** 2 + k["c_int"])
    g = -(xi * (y + k["one_int"]))
    return requantize(g, RequantParams(k["mul"], k["shift"]))


def isqrt_newton(n) -> np.ndarray:
    """Elementwise floor(sqrt(n)) for non-negative int64 by Newton iteration."""
    n = _i64(n)
    if np.any(n < 0):
        raise ValueError("isqrt of a negative number")
    m = np.maximum(n, 1)
    _, e = np.frexp(m.astype(np.float64))
    x = np.left_shift(np.int64(1), ((e.astype(np.int64) + 1) // 2))
    while True:
        y = (x + m // x) // 2
        better = y < x
        if not better.any():
            return np.where(n == 0, 0, x)
        x = np.where(better, y, x)


def i_layernorm(x, gamma, beta, gamma_exp: int, out_exp: int) -> np.ndarray:
    """Row-wise integer layer normalization over the last axis.

    Works on the exactly-scaled deviations ``n*x - sum(x)`` so the mean
    introduces no rounding; the standard deviation comes from an integer
    Newton square root with the variance floored at one input LSB^2.
    ``gamma`` is int8 at 2^-gamma_exp, ``beta`` int16 at the output scale.
    """
    xi = _i64(x)
    n = xi.shape[-1]
    _check(2 <= n <= 256, f"row length must be in [2, 256], got {n}")
    g = _i64(gamma)
    b = _i64(beta)
    _check(g.shape[-1] == n and b.shape[-1] == n, "gamma/beta length must match the row")
    F = LN_FRAC_BITS
    d = n * xi - xi.sum(axis=-1, keepdims=True)
    ss = (d * d).sum(axis=-1, keepdims=True)
    var = np.maximum((ss << (2 * F)) // n, (n * n) << (2 * F))
    std = isqrt_newton(var)
    norm = ((d << (2 * F)) + std // 2) // std
    shift = gamma_exp + F - out_exp
    _check(0 <= shift < 32, f"output scale 2^-{out_exp} unreachable from gamma scale 2^-{gamma_exp}")
    y = _i64(requantize(g * norm, RequantParams(1, shift, bits=16))) + b
    return np.clip(y, -128, 127).astype(np.int8)
