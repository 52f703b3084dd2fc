"""Quantized tensor containers, layouts and attention-shape bookkeeping."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

INT8_MIN = -128
INT8_MAX = 127


class ShapeError(ValueError):
    """Raised for invalid or mismatching tensor extents."""


class Layout(enum.Enum):
    """Axis order of a dense row-major int8 buffer."""

    SE = "SE"
    HSP = "HSP"
    HPS = "HPS"
    SHS = "SHS"
    SS_per_head = "SS_per_head"
    SE_out = "SE_out"
    SHP = "SHP"
    HSE = "HSE"
    # weight storage orders
    HPE = "HPE"
    E_HP = "E_HP"
    HEE = "HEE"

    @property
    def axes(self) -> tuple[str, ...]:
        return _AXES[self]

    @property
    def ndim(self) -> int:
        return len(_AXES[self])


_AXES = {
    Layout.SE: ("S", "E"),
    Layout.HSP: ("H", "S", "P"),
    Layout.HPS: ("H", "P", "S"),
    Layout.SHS: ("S", "H", "S'"),
    Layout.SS_per_head: ("H", "S", "S'"),
    Layout.SE_out: ("S", "E"),
    Layout.SHP: ("S", "H", "P"),
    Layout.HSE: ("H", "S", "E"),
    Layout.HPE: ("H", "P", "E"),
    Layout.E_HP: ("E", "H*P"),
    Layout.HEE: ("H", "E", "E'"),
}


@dataclass(frozen=True)
class QuantTensor:
    """int8 buffer with a layout tag and a power-of-two scale.

    The real value of an element ``q`` is ``q * 2**(-scale_exp)``.
    """

    data: np.ndarray
    layout: Layout
    scale_exp: int = 0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != self.layout.ndim:
            raise ShapeError(
                f"layout {self.layout.name} expects {self.layout.ndim} axes, got shape {data.shape}")
        if data.dtype != np.int8:
            if data.size and (data.min() < INT8_MIN or data.max() > INT8_MAX):
                raise ValueError("values outside the int8 range")
            data = data.astype(np.int8)
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "scale_exp", int(self.scale_exp))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def nbytes(self) -> int:
        return int(self.data.size)

    def dequantize(self) -> np.ndarray:
        return self.data.astype(np.float64) * 2.0 ** (-self.scale_exp)

    def __eq__(self, other):
        if not isinstance(other, QuantTensor):
            return NotImplemented
        return (self.layout is other.layout and self.scale_exp == other.scale_exp
                and np.array_equal(self.data, other.data))

    __hash__ = None


def alloc_tensor(shape: Sequence[int], layout: Layout, scale_exp: int = 0) -> QuantTensor:
    shape = tuple(int(n) for n in shape)
    if any(n <= 0 for n in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    return QuantTensor(np.zeros(shape, dtype=np.int8), layout, scale_exp)


def offset(t: QuantTensor, coords: Sequence[int]) -> int:
    """Row-major buffer offset of ``coords`` in the tensor's layout order."""
    if len(coords) != len(t.shape):
        raise IndexError(f"expected {len(t.shape)} coordinates, got {len(coords)}")
    off = 0
    for c, n in zip(coords, t.shape):
        if not 0 <= c < n:
            raise IndexError(f"coordinate {c} outside extent {n}")
        off = off * n + c
    return off


def index(t: QuantTensor, coords: Sequence[int]) -> int:
    return int(t.data.reshape(-1)[offset(t, coords)])


@dataclass(frozen=True)
class AttnDims:
    """Multi-head self-attention hyperparameters."""

    S: int
    E: int
    P: int
    H: int

    def __post_init__(self):
        for name in ("S", "E", "P", "H"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ShapeError(f"{name} must be a positive integer, got {v}")

    def __str__(self):
        return f"S={self.S},E={self.E},P={self.P},H={self.H}"


EEG = AttnDims(S=81, E=32, P=32, H=8)
ECG = AttnDims(S=66, E=16, P=2, H=8)
TR = AttnDims(S=5, E=32, P=32, H=8)
REFERENCE_SHAPES = {"eeg": EEG, "ecg": ECG, "tr": TR}

ROLES = ("X", "Q", "K", "V", "A", "M1", "OUT", "W_qkv_each", "W_out", "W_star")


def tensor_bytes(dims: AttnDims, role: str) -> int:
    """int8 byte size of one tensor of the attention block."""
    S, E, P, H = dims.S, dims.E, dims.P, dims.H
    sizes = {
        "X": S * E,
        "Q": H * S * P,
        "K": H * S * P,
        "V": H * S * P,
        "M1": H * S * P,
        "A": H * S * S,
        "OUT": S * E,
        "W_qkv_each": H * E * P,
        "W_out": H * P * E,
        "W_star": H * E * E,
    }
    try:
        return sizes[role]
    except KeyError:
        raise KeyError(f"unknown tensor role {role!r}") from None


@dataclass(frozen=True)
class RequantParams:
    """int32 -> int8 reduction: ``clamp((acc * eps_mul + round) >> eps_div)``.

    ``bias`` holds the 16-bit per-output-feature addend of linear layers,
    expressed at the accumulator scale.
    """

    eps_mul: int = 1
    eps_div: int = 0
    bias: np.ndarray | None = field(default=None, compare=False)
    bits: int = 8

    def __post_init__(self):
        if not 0 <= self.eps_mul < 2 ** 16:
            raise ValueError(f"eps_mul must fit 16 unsigned bits, got {self.eps_mul}")
        if not 0 <= self.eps_div < 32:
            raise ValueError(f"eps_div must be in [0, 32), got {self.eps_div}")
        if self.bias is not None:
            b = np.asarray(self.bias)
            if b.ndim != 1:
                raise ShapeError("bias must be a vector")
            if b.size and (b.min() < -2 ** 15 or b.max() >= 2 ** 15):
                raise ValueError("bias outside the int16 range")
            b = b.astype(np.int16)
            b.setflags(write=False)
            object.__setattr__(self, "bias", b)

    def __eq__(self, other):
        if not isinstance(other, RequantParams):
            return NotImplemented
        if (self.eps_mul, self.eps_div, self.bits) != (other.eps_mul, other.eps_div, other.bits):
            return False
        if self.bias is None or other.bias is None:
            return self.bias is None and other.bias is None
        return np.array_equal(self.bias, other.bias)

    __hash__ = None

    def with_bias_slice(self, start: int, stop: int) -> "RequantParams":
        bias = None if self.bias is None else self.bias[start:stop]
        return RequantParams(self.eps_mul, self.eps_div, bias, self.bits)

    def bias_or_zeros(self, n: int) -> np.ndarray:
        if self.bias is None:
            return np.zeros(n, dtype=np.int64)
        if self.bias.size != n:
            raise ShapeError(f"bias has {self.bias.size} entries, layer has {n} features")
        return self.bias.astype(np.int64)
