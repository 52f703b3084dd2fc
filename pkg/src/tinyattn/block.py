"""Quantized attention block: weights, scales, and construction from float."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import oracle
from .fwsa import fuse_weights
from .kernels import SOFTMAX_OUT_EXP, LinearWeights
from .quant import (attention_fold_shift, calibrate, dequantize, derive_requant, quantize_array,
                    quantize_bias)
from .tensor import AttnDims, Layout, QuantTensor, RequantParams, ShapeError

MHSA = "MHSA"
FWSA = "FWSA"
FLAVORS = (MHSA, FWSA)


@dataclass
class FloatWeights:
    """Float parameters of one attention block.

    ``Wq, Wk, Wv`` are (H, E, P); ``Wo`` is (H*P, E). Biases are optional:
    ``bq, bk, bv`` (H, P) and ``bo`` (E,).
    """

    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray
    bq: np.ndarray | None = None
    bk: np.ndarray | None = None
    bv: np.ndarray | None = None
    bo: np.ndarray | None = None

    @property
    def dims_hep(self) -> tuple[int, int, int]:
        return np.shape(self.Wq)

    def biases(self) -> dict:
        return {k: getattr(self, k) for k in ("bq", "bk", "bv", "bo") if getattr(self, k) is not None}


def random_float_weights(dims: AttnDims, seed: int = 0, bias: bool = True) -> FloatWeights:
    rng = np.random.default_rng(seed)
    H, E, P = dims.H, dims.E, dims.P
    w = lambda *shape, fan: rng.normal(0.0, 1.0 / np.sqrt(fan), size=shape)
    fw = FloatWeights(w(H, E, P, fan=E), w(H, E, P, fan=E), w(H, E, P, fan=E), w(H * P, E, fan=H * P))
    if bias:
        fw.bq, fw.bk, fw.bv = (rng.normal(0.0, 0.1, size=(H, P)) for _ in range(3))
        fw.bo = rng.normal(0.0, 0.1, size=E)
    return fw


def random_input(dims: AttnDims, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed + 7919).normal(0.0, 0.5, size=(dims.S, dims.E))


@dataclass
class AttentionBlock:
    """Integer attention block ready for the kernels.

    ``exps`` maps activation names (x, q, k, v, m2, logit, m1, out) to
    power-of-two scale exponents. ``rp_logits`` includes the folded
    temperature shift.
    """

    dims: AttnDims
    flavor: str
    exps: dict
    wv: LinearWeights
    wo: LinearWeights
    rp_logits: RequantParams
    rp_m1: RequantParams
    wq: LinearWeights | None = None
    wk: LinearWeights | None = None
    w_star: QuantTensor | None = None
    rp_m2: RequantParams | None = None
    float_weights: FloatWeights | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.flavor not in FLAVORS:
            raise ValueError(f"flavor must be one of {FLAVORS}, got {self.flavor!r}")
        d = self.dims
        if self.flavor == MHSA:
            if self.wq is None or self.wk is None:
                raise ShapeError("MHSA block needs Q and K projection weights")
            for lw in (self.wq, self.wk):
                self._expect(lw.w.shape, (d.H, d.P, d.E), "Q/K weights")
        else:
            if self.w_star is None or self.rp_m2 is None:
                raise ShapeError("FWSA block needs the fused W* weights and their requant params")
            self._expect(self.w_star.shape, (d.H, d.E, d.E), "W*")
        self._expect(self.wv.w.shape, (d.H, d.P, d.E), "V weights")
        self._expect(self.wo.w.shape, (d.E, d.H * d.P), "output weights")

    @staticmethod
    def _expect(got, want, what):
        if tuple(got) != tuple(want):
            raise ShapeError(f"{what}: expected shape {want}, got {tuple(got)}")

    def weight_tensors(self) -> dict:
        if self.flavor == MHSA:
            return {"Wq": self.wq.w, "Wk": self.wk.w, "Wv": self.wv.w, "Wo": self.wo.w}
        return {"W_star": self.w_star, "Wv": self.wv.w, "Wo": self.wo.w}

    def quantize_input(self, X) -> QuantTensor:
        return QuantTensor(quantize_array(X, self.exps["x"]), Layout.SE, self.exps["x"])


def _qweight(W, layout: Layout) -> QuantTensor:
    exp = calibrate(W).chosen_exp
    return QuantTensor(quantize_array(W, exp), layout, exp)


def _to_hpe(W) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(W, (0, 2, 1)))


def quantize_block(fw: FloatWeights, X_calib, flavor: str = MHSA) -> AttentionBlock:
    """Quantize float weights and calibrate activation scales on ``X_calib``.

    Ranges are observed on a float forward pass that uses the already
    quantized weights and input, so the chosen exponents match what the
    integer path actually sees.
    """
    H, E, P = fw.dims_hep
    X_calib = np.asarray(X_calib, dtype=np.float64)
    dims = AttnDims(S=X_calib.shape[0], E=E, P=P, H=H)
    x_exp = calibrate(X_calib).chosen_exp
    Xd = dequantize(quantize_array(X_calib, x_exp), x_exp)
    fold = attention_fold_shift(P)
    exps = {"x": x_exp}

    def projection(W, b, name):
        w = _qweight(_to_hpe(W), Layout.HPE)
        Wd = np.transpose(w.dequantize(), (0, 2, 1))
        acc_exp = x_exp + w.scale_exp
        bias = None if b is None else quantize_bias(np.reshape(b, -1), acc_exp)
        y = np.einsum("se,hep->hsp", Xd, Wd)
        if bias is not None:
            y = y + dequantize(bias, acc_exp).reshape(H, 1, P)
        exps[name] = calibrate(y).chosen_exp
        rp = derive_requant(x_exp, w.scale_exp, exps[name], bias=bias)
        return LinearWeights(w, rp), dequantize(quantize_array(y, exps[name]), exps[name])

    wv, Vd = projection(fw.Wv, fw.bv, "v")
    kw = {}
    if flavor == MHSA:
        wq, Qd = projection(fw.Wq, fw.bq, "q")
        wk, Kd = projection(fw.Wk, fw.bk, "k")
        logits = np.einsum("hsp,htp->hst", Qd, Kd) * 2.0 ** -fold
        exps["logit"] = calibrate(logits).chosen_exp
        rp_logits = derive_requant(exps["q"], exps["k"], exps["logit"], extra_shift=fold)
        kw.update(wq=wq, wk=wk)
    elif flavor == FWSA:
        w_star = _qweight(fuse_weights(fw.Wq, fw.Wk), Layout.HEE)
        m2 = np.einsum("se,hef->hsf", Xd, w_star.dequantize())
        exps["m2"] = calibrate(m2).chosen_exp
        m2d = dequantize(quantize_array(m2, exps["m2"]), exps["m2"])
        logits = np.einsum("hsf,tf->hst", m2d, Xd) * 2.0 ** -fold
        exps["logit"] = calibrate(logits).chosen_exp
        rp_logits = derive_requant(exps["m2"], x_exp, exps["logit"], extra_shift=fold)
        kw.update(w_star=w_star, rp_m2=derive_requant(x_exp, w_star.scale_exp, exps["m2"]))
    else:
        raise ValueError(f"flavor must be one of {FLAVORS}, got {flavor!r}")

    lq = dequantize(quantize_array(logits, exps["logit"]), exps["logit"])
    A = oracle.softmax_rows(lq)
    M = np.einsum("hst,htp->hsp", A, Vd)
    exps["m1"] = calibrate(M).chosen_exp
    rp_m1 = derive_requant(SOFTMAX_OUT_EXP, exps["v"], exps["m1"])
    Md = dequantize(quantize_array(M, exps["m1"]), exps["m1"])

    wo_t = _qweight(np.ascontiguousarray(np.asarray(fw.Wo).T), Layout.E_HP)
    acc_exp = exps["m1"] + wo_t.scale_exp
    bo = None if fw.bo is None else quantize_bias(fw.bo, acc_exp)
    out = np.transpose(Md, (1, 0, 2)).reshape(dims.S, H * P) @ wo_t.dequantize().T
    if bo is not None:
        out = out + dequantize(bo, acc_exp)
    exps["out"] = calibrate(out).chosen_exp
    wo = LinearWeights(wo_t, derive_requant(exps["m1"], wo_t.scale_exp, exps["out"], bias=bo))

    return AttentionBlock(dims=dims, flavor=flavor, exps=exps, wv=wv, wo=wo, rp_logits=rp_logits,
                          rp_m1=rp_m1, float_weights=fw, **kw)


def reference_forward(block: AttentionBlock, X: QuantTensor) -> QuantTensor:
    """Whole-block integer forward pass built only from the naive oracles."""
    x = X.data
    r = block.rp_logits
    if block.flavor == MHSA:
        q = oracle.naive_projection(x, block.wq.w.data, block.wq.rp.eps_mul, block.wq.rp.eps_div, block.wq.rp.bias)
        k = oracle.naive_projection(x, block.wk.w.data, block.wk.rp.eps_mul, block.wk.rp.eps_div, block.wk.rp.bias)
        A = oracle.naive_attention(q, k, r.eps_mul, r.eps_div, block.exps["logit"])
    else:
        m2 = block.rp_m2
        A = oracle.naive_fwsa(x, block.w_star.data, m2.eps_mul, m2.eps_div, r.eps_mul, r.eps_div,
                              block.exps["logit"])
    v = oracle.naive_projection(x, block.wv.w.data, block.wv.rp.eps_mul, block.wv.rp.eps_div, block.wv.rp.bias)
    M = oracle.naive_context(A, v, block.rp_m1.eps_mul, block.rp_m1.eps_div)
    o = oracle.naive_output(M, block.wo.w.data, block.wo.rp.eps_mul, block.wo.rp.eps_div, block.wo.rp.bias)
    return QuantTensor(o, Layout.SE_out, block.exps["out"])
