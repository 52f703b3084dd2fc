"""Power-of-two (TQT-style) quantization and requantization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import INT8_MAX, INT8_MIN, Layout, QuantTensor, RequantParams

DEFAULT_EXP = 7


class ScaleOverflowError(ValueError):
    """The requantization multiplier does not fit in 16 bits."""


@dataclass(frozen=True)
class CalibrationStats:
    max_abs: float
    chosen_exp: int


def requantize(acc, rp: RequantParams):
    """Reduce int32 accumulator(s) to int8.

    ``clamp((acc * eps_mul + 2**(eps_div-1)) >> eps_div)``; the rounding
    constant makes the shift round half up. Accepts a Python int or an
    integer array; arrays come back as int8.
    """
    lo = -(1 << (rp.bits - 1))
    hi = (1 << (rp.bits - 1)) - 1
    rnd = (1 << (rp.eps_div - 1)) if rp.eps_div > 0 else 0
    if isinstance(acc, (int, np.integer)):
        v = (int(acc) * rp.eps_mul + rnd) >> rp.eps_div
        return min(max(v, lo), hi)
    a = np.asarray(acc, dtype=np.int64)
    v = (a * rp.eps_mul + rnd) >> rp.eps_div
    return np.clip(v, lo, hi).astype(np.int8 if rp.bits <= 8 else np.int32)


def quantize_float(x: float, scale_exp: int) -> int:
    if not math.isfinite(x):
        raise ValueError(f"cannot quantize non-finite value {x}")
    q = round(x * 2.0 ** scale_exp)  # Python round is half-to-even
    return min(max(int(q), INT8_MIN), INT8_MAX)


def quantize_array(x, scale_exp: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    return np.clip(np.rint(np.ldexp(x, scale_exp)), INT8_MIN, INT8_MAX).astype(np.int8)


def quantize_tensor(x, layout: Layout, scale_exp: int | None = None) -> QuantTensor:
    if scale_exp is None:
        scale_exp = calibrate(x).chosen_exp
    return QuantTensor(quantize_array(x, scale_exp), layout, scale_exp)


def dequantize(q, scale_exp: int) -> np.ndarray:
    return np.ldexp(np.asarray(q, dtype=np.float64), -scale_exp)


def calibrate(x) -> CalibrationStats:
    """Pick the finest power-of-two scale whose int8 range still covers ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    m = float(np.max(np.abs(x)))
    if not math.isfinite(m):
        raise ValueError("cannot calibrate non-finite values")
    if m == 0.0:
        return CalibrationStats(0.0, DEFAULT_EXP)
    n = math.floor(math.log2(INT8_MAX / m))
    # log2 may land one off near exact powers of two
    while INT8_MAX * 2.0 ** (-(n + 1)) >= m:
        n += 1
    while INT8_MAX * 2.0 ** (-n) < m:
        n -= 1
    return CalibrationStats(m, n)


def derive_requant(in_exp: int, w_exp: int, out_exp: int, extra_shift: int = 0,
                   bias=None) -> RequantParams:
    """Requant parameters taking an accumulator at scale 2^-(in+w) to 2^-out.

    ``extra_shift`` divides by a further power of two (used for the folded
    attention temperature).
    """
    shift = in_exp + w_exp - out_exp + extra_shift
    if shift >= 0:
        if shift >= 32:
            raise ScaleOverflowError(f"shift {shift} exceeds 31")
        return RequantParams(eps_mul=1, eps_div=shift, bias=bias)
    mul = 1 << (-shift)
    if mul >= 1 << 16:
        raise ScaleOverflowError(f"multiplier 2^{-shift} does not fit 16 bits")
    return RequantParams(eps_mul=mul, eps_div=0, bias=bias)


def attention_fold_shift(P: int) -> int:
    """Power-of-two stand-in for the 1/sqrt(P) logit temperature.

    Returns round(log2(sqrt(P))), ties rounded up.
    """
    return math.floor(0.5 * math.log2(P) + 0.5)


def quantize_bias(b, acc_exp: int) -> np.ndarray:
    """Quantize a float bias at the accumulator scale, saturating to int16."""
    b = np.asarray(b, dtype=np.float64)
    return np.clip(np.rint(np.ldexp(b, acc_exp)), -2 ** 15, 2 ** 15 - 1).astype(np.int16)
