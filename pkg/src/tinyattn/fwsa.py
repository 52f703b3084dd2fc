"""Offline Q/K weight fusion and the analytic MHSA vs FWSA cost model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import AttnDims, ShapeError


@dataclass(frozen=True)
class AttnCostReport:
    macs_mhsa: int
    macs_fwsa: int
    params_mhsa: int
    params_fwsa: int
    op_beneficial: bool
    param_beneficial: bool

    @property
    def mac_change(self) -> float:
        """Relative MAC change of FWSA vs MHSA (negative is a reduction)."""
        return self.macs_fwsa / self.macs_mhsa - 1.0

    @property
    def param_change(self) -> float:
        return self.params_fwsa / self.params_mhsa - 1.0


def fuse_weights(Wq, Wk) -> np.ndarray:
    """Per-head ``W*[h] = Wq[h] @ Wk[h].T`` in float; shapes (H,E,P) -> (H,E,E)."""
    Wq = np.asarray(Wq, dtype=np.float64)
    Wk = np.asarray(Wk, dtype=np.float64)
    if Wq.ndim != 3 or Wq.shape != Wk.shape:
        raise ShapeError(f"Wq {Wq.shape} and Wk {Wk.shape} must both be (H, E, P)")
    return np.einsum("hep,hfp->hef", Wq, Wk)


def count_core_ops(dims: AttnDims) -> tuple[int, int]:
    """MACs of the part FWSA replaces: Q/K projections + Q.K^T vs X.W*.X^T."""
    S, E, P, H = dims.S, dims.E, dims.P, dims.H
    return 2 * H * S * P * E + H * S * S * P, H * S * E * E + H * S * S * E


def count_block_ops(dims: AttnDims) -> tuple[int, int]:
    """MACs of the whole attention block for both flavors."""
    S, E, P, H = dims.S, dims.E, dims.P, dims.H
    mhsa = 2 * S * P * H * (2 * E + S)
    fwsa = H * S * E * E + H * S * S * E + 2 * S * P * H * E + H * S * S * P
    return mhsa, fwsa


def count_params(dims: AttnDims) -> tuple[int, int, int, int]:
    """(core MHSA, core FWSA, block MHSA, block FWSA) weight counts, biases excluded."""
    E, P, H = dims.E, dims.P, dims.H
    core_mhsa = 2 * H * P * E
    core_fwsa = H * E * E
    return core_mhsa, core_fwsa, 4 * H * E * P, core_fwsa + 2 * H * E * P


def count_biases(dims: AttnDims) -> tuple[int, int]:
    """16-bit bias entries: MHSA has q/k/v/out biases, FWSA only v/out."""
    E, P, H = dims.E, dims.P, dims.H
    return 3 * H * P + E, H * P + E


def op_threshold(S: int, P: int) -> float:
    """Embedding size below which FWSA needs fewer MACs."""
    return P - S / 2 + math.sqrt(4 * P * P + S * S) / 2


def fwsa_beneficial(dims: AttnDims) -> tuple[bool, bool]:
    """(fewer MACs, fewer parameters) for FWSA.

    The MAC condition ``E < P - S/2 + sqrt(4P^2 + S^2)/2`` is evaluated
    exactly in integers: ``2E - 2P + S < sqrt(4P^2 + S^2)``.
    """
    S, E, P = dims.S, dims.E, dims.P
    lhs = 2 * E - 2 * P + S
    op_flag = lhs < 0 or lhs * lhs < 4 * P * P + S * S
    return op_flag, E < 2 * P


def cost_report(dims: AttnDims) -> AttnCostReport:
    macs_mhsa, macs_fwsa = count_block_ops(dims)
    _, _, params_mhsa, params_fwsa = count_params(dims)
    op_flag, param_flag = fwsa_beneficial(dims)
    return AttnCostReport(macs_mhsa, macs_fwsa, params_mhsa, params_fwsa, op_flag, param_flag)
