"""Text container for quantized attention blocks, and platform configs.

A container is a sequence of header lines ``keyword key=value ...``.
``tensor``, ``bias`` and ``float`` headers are followed by exactly one
base64 line holding the raw little-endian buffer. Example::

    tinyattn 1
    dims S=5 E=32 P=32 H=8 F=128
    flavor MHSA
    exps x=5 q=4 k=4 v=5 logit=3 m1=6 out=6
    tensor name=Wq shape=8,32,32 scale_exp=8
    <base64>
    requant name=q mul=1 div=9 bits=8
    bias name=q length=256
    <base64>
    end

Errors carry the 1-based line number and the offending field.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np

from .block import FLAVORS, FWSA, MHSA, AttentionBlock, FloatWeights, quantize_block, random_float_weights, random_input
from .kernels import LinearWeights
from .planner import MemConfig
from .tensor import AttnDims, Layout, QuantTensor, RequantParams, ShapeError

MAGIC = "tinyattn"
VERSION = 1

# weight tensor name -> (layout, requant name)
WEIGHT_SECTIONS = {
    "Wq": (Layout.HPE, "q"),
    "Wk": (Layout.HPE, "k"),
    "Wv": (Layout.HPE, "v"),
    "Wo": (Layout.E_HP, "out"),
    "W_star": (Layout.HEE, "m2"),
}
REQUIRED = {
    MHSA: ("Wq", "Wk", "Wv", "Wo"),
    FWSA: ("W_star", "Wv", "Wo"),
}
FLOAT_FIELDS = ("Wq", "Wk", "Wv", "Wo", "bq", "bk", "bv", "bo")


class ContainerError(ValueError):
    def __init__(self, line: int, fld: str, msg: str):
        shown = fld if len(fld) <= 40 else fld[:37] + "..."
        where = f"line {line}: " if line > 0 else ""
        super().__init__(f"{where}{shown}: {msg}")
        self.line = line
        self.field = fld


@dataclass
class ModelContainer:
    block: AttentionBlock
    ffn_width: int = 0
    float_weights: FloatWeights | None = field(default=None, compare=False)
    name: str = ""

    @property
    def dims(self) -> AttnDims:
        return self.block.dims

    @property
    def flavor(self) -> str:
        return self.block.flavor


# --------------------------------------------------------------------------
# emit
# --------------------------------------------------------------------------

def _b64(arr: np.ndarray, dtype) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()).decode()


def _shape(s) -> str:
    return ",".join(str(int(n)) for n in s)


def emit_container(m: ModelContainer) -> str:
    b = m.block
    d = b.dims
    out = [f"{MAGIC} {VERSION}"]
    if m.name:
        out.append(f"name value={m.name}")
    out.append(f"dims S={d.S} E={d.E} P={d.P} H={d.H} F={m.ffn_width}")
    out.append(f"flavor {b.flavor}")
    out.append("exps " + " ".join(f"{k}={v}" for k, v in sorted(b.exps.items())))
    tensors = {"Wv": b.wv, "Wo": b.wo}
    if b.flavor == MHSA:
        tensors.update(Wq=b.wq, Wk=b.wk)
    rps = {"logits": b.rp_logits, "m1": b.rp_m1}
    for name in REQUIRED[b.flavor]:
        if name == "W_star":
            t, rp = b.w_star, b.rp_m2
        else:
            t, rp = tensors[name].w, tensors[name].rp
        rps[WEIGHT_SECTIONS[name][1]] = rp
        out.append(f"tensor name={name} shape={_shape(t.shape)} scale_exp={t.scale_exp}")
        out.append(_b64(t.data, np.int8))
    for rname in sorted(rps):
        rp = rps[rname]
        out.append(f"requant name={rname} mul={rp.eps_mul} div={rp.eps_div} bits={rp.bits}")
        if rp.bias is not None:
            out.append(f"bias name={rname} length={rp.bias.size}")
            out.append(_b64(rp.bias, np.int16))
    fw = m.float_weights
    if fw is not None:
        for name in FLOAT_FIELDS:
            arr = getattr(fw, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            out.append(f"float name={name} shape={_shape(arr.shape)} dtype=float64")
            out.append(_b64(arr, np.float64))
    out.append("end")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# parse
# --------------------------------------------------------------------------

def _fields(lineno: int, parts: list[str]) -> dict:
    kv = {}
    for p in parts:
        if "=" not in p:
            raise ContainerError(lineno, p, "expected key=value")
        k, v = p.split("=", 1)
        if k in kv:
            raise ContainerError(lineno, k, "duplicate field")
        kv[k] = v
    return kv


def _int(lineno: int, kv: dict, key: str, default=None) -> int:
    if key not in kv:
        if default is not None:
            return default
        raise ContainerError(lineno, key, "missing field")
    try:
        return int(kv[key])
    except ValueError:
        raise ContainerError(lineno, key, f"not an integer: {kv[key]!r}") from None


def _shape_field(lineno: int, kv: dict) -> tuple:
    if "shape" not in kv:
        raise ContainerError(lineno, "shape", "missing field")
    try:
        shape = tuple(int(n) for n in kv["shape"].split(","))
    except ValueError:
        raise ContainerError(lineno, "shape", f"bad shape {kv['shape']!r}") from None
    if any(n < 1 for n in shape):
        raise ContainerError(lineno, "shape", "extents must be positive")
    return shape


def _blob(lines, i: int, name: str, dtype, count: int) -> np.ndarray:
    if i >= len(lines):
        raise ContainerError(i + 1, name, "missing data line")
    try:
        raw = base64.b64decode(lines[i].strip(), validate=True)
    except ValueError:
        raise ContainerError(i + 1, name, "data line is not valid base64") from None
    dt = np.dtype(dtype).newbyteorder("<")
    if len(raw) != count * dt.itemsize:
        raise ContainerError(i + 1, name, f"blob holds {len(raw) // dt.itemsize} elements, header declares {count}")
    return np.frombuffer(raw, dtype=dt).astype(np.dtype(dtype).newbyteorder("="))


def parse_container(text: str) -> ModelContainer:
    lines = text.splitlines()
    if not lines or lines[0].split() != [MAGIC, str(VERSION)]:
        raise ContainerError(1, "header", f"expected '{MAGIC} {VERSION}'")
    dims = ffn = flavor = None
    name = ""
    exps: dict = {}
    tensors, requants, biases, floats = {}, {}, {}, {}
    where = {}
    i = 1
    ended = False
    while i < len(lines):
        lineno = i + 1
        parts = lines[i].split()
        i += 1
        if not parts or parts[0].startswith("#"):
            continue
        kw, rest = parts[0], parts[1:]
        if kw == "end":
            ended = True
            break
        if kw == "flavor":
            if len(rest) != 1 or rest[0] not in FLAVORS:
                raise ContainerError(lineno, "flavor", f"expected one of {FLAVORS}")
            flavor = rest[0]
            continue
        kv = _fields(lineno, rest)
        if kw == "name":
            name = kv.get("value", "")
        elif kw == "dims":
            try:
                dims = AttnDims(*(_int(lineno, kv, k) for k in "SEPH"))
            except ShapeError as exc:
                raise ContainerError(lineno, "dims", str(exc)) from None
            ffn = _int(lineno, kv, "F", 0)
        elif kw == "exps":
            exps = {k: _int(lineno, kv, k) for k in kv}
        elif kw == "tensor":
            tname = kv.get("name")
            if tname not in WEIGHT_SECTIONS:
                raise ContainerError(lineno, "name", f"unknown tensor {tname!r}")
            shape = _shape_field(lineno, kv)
            data = _blob(lines, i, tname, np.int8, int(np.prod(shape))).reshape(shape)
            tensors[tname] = (data, _int(lineno, kv, "scale_exp"))
            where[tname] = lineno
            i += 1
        elif kw == "requant":
            rname = kv.get("name")
            if not rname:
                raise ContainerError(lineno, "name", "missing field")
            requants[rname] = (_int(lineno, kv, "mul"), _int(lineno, kv, "div"), _int(lineno, kv, "bits", 8), lineno)
        elif kw == "bias":
            rname = kv.get("name")
            if not rname:
                raise ContainerError(lineno, "name", "missing field")
            biases[rname] = _blob(lines, i, f"bias {rname}", np.int16, _int(lineno, kv, "length"))
            i += 1
        elif kw == "float":
            fname = kv.get("name")
            if fname not in FLOAT_FIELDS:
                raise ContainerError(lineno, "name", f"unknown float section {fname!r}")
            shape = _shape_field(lineno, kv)
            floats[fname] = _blob(lines, i, f"float {fname}", np.float64, int(np.prod(shape))).reshape(shape)
            i += 1
        else:
            raise ContainerError(lineno, kw, "unknown section")
    if not ended:
        raise ContainerError(len(lines), "end", "missing 'end' line")
    if dims is None:
        raise ContainerError(len(lines), "dims", "missing section")
    if flavor is None:
        raise ContainerError(len(lines), "flavor", "missing section")
    need = {"x", "v", "logit", "m1", "out"} | ({"q", "k"} if flavor == MHSA else {"m2"})
    missing = sorted(need - set(exps))
    if missing:
        raise ContainerError(len(lines), "exps", f"missing exponents {missing}")
    for t in REQUIRED[flavor]:
        if t not in tensors:
            raise ContainerError(len(lines), t, f"{flavor} container needs a '{t}' tensor section")
    rnames = {"logits", "m1"} | {WEIGHT_SECTIONS[t][1] for t in REQUIRED[flavor]}
    for r in sorted(rnames):
        if r not in requants:
            raise ContainerError(len(lines), r, f"missing requant section for {r!r}")

    def rp(rname):
        mul, div, bits, ln = requants[rname]
        try:
            return RequantParams(mul, div, biases.get(rname), bits)
        except (ValueError, ShapeError) as exc:
            raise ContainerError(ln, rname, str(exc)) from None

    def qt(tname):
        data, exp = tensors[tname]
        return QuantTensor(data, WEIGHT_SECTIONS[tname][0], exp)

    kw = {}
    if flavor == MHSA:
        kw.update(wq=LinearWeights(qt("Wq"), rp("q")), wk=LinearWeights(qt("Wk"), rp("k")))
    else:
        kw.update(w_star=qt("W_star"), rp_m2=rp("m2"))
    fw = None
    if floats:
        missing_f = [k for k in ("Wq", "Wk", "Wv", "Wo") if k not in floats]
        if missing_f:
            raise ContainerError(len(lines), "float", f"float section lacks {missing_f}")
        fw = FloatWeights(**floats)
    try:
        block = AttentionBlock(dims=dims, flavor=flavor, exps=exps, wv=LinearWeights(qt("Wv"), rp("v")),
                               wo=LinearWeights(qt("Wo"), rp("out")), rp_logits=rp("logits"), rp_m1=rp("m1"),
                               float_weights=fw, **kw)
    except ShapeError as exc:
        raise ContainerError(where.get("Wv", len(lines)), "shape", str(exc)) from None
    return ModelContainer(block=block, ffn_width=ffn, float_weights=fw, name=name)


def load_container(path) -> ModelContainer:
    with open(path, encoding="utf-8") as f:
        return parse_container(f.read())


def build_container(dims: AttnDims, flavor: str = MHSA, seed: int = 0, ffn_width: int = 0,
                    name: str = "", with_float: bool = True) -> ModelContainer:
    """Seeded random weights, quantized and calibrated on a seeded input."""
    fw = random_float_weights(dims, seed)
    block = quantize_block(fw, random_input(dims, seed), flavor)
    return ModelContainer(block, ffn_width, fw if with_float else None, name)


# --------------------------------------------------------------------------
# platform
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PlatformConfig:
    l1_bytes: int = 128_000
    l2_bytes: int = 1_500_000
    cores: int = 8
    simd_width: int = 4
    weights_resident: bool = True
    residual_live: bool = True
    count_biases: bool = False

    def __post_init__(self):
        self.mem()  # validates capacities
        if self.simd_width < 1:
            raise ValueError("simd_width must be >= 1")

    def mem(self) -> MemConfig:
        return MemConfig(self.l1_bytes, self.l2_bytes, self.cores, self.weights_resident,
                         self.residual_live, self.count_biases)


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_bool(key: str, value: str) -> bool:
    try:
        return _BOOL[value.strip().lower()]
    except KeyError:
        raise ValueError(f"{key}: expected a boolean, got {value!r}") from None


def parse_platform(text: str, overrides: dict | None = None) -> PlatformConfig:
    """``key = value`` lines; '#' starts a comment."""
    vals = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContainerError(n, line, "expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        vals[k] = (n, v)
    for k, v in (overrides or {}).items():
        vals[k] = (0, v)
    kw = {}
    for k, (n, v) in vals.items():
        if k not in PlatformConfig.__dataclass_fields__:
            raise ContainerError(n, k, "unknown platform key")
        try:
            kw[k] = parse_bool(k, v) if isinstance(getattr(PlatformConfig, k), bool) else int(v)
        except ValueError as exc:
            raise ContainerError(n, k, str(exc)) from None
    try:
        return PlatformConfig(**kw)
    except ValueError as exc:
        raise ContainerError(0, "platform", str(exc)) from None
