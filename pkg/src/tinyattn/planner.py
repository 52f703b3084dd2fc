"""Layer-wise and depth-first tiling plans over a two-level memory.

A plan is an ordered list of steps. Each step runs one kernel (or, for
depth-first tiling, the fused GEMM -> softmax -> GEMM chain) over tiles
of its loop axes; operands are described by the loop axes they depend on,
which determines both tile sizes and how often they are transferred.

L2 accounting is liveness-based: a tensor occupies L2 from the step that
produces it to the end of its last consuming step. Two policies shape the
result:

* ``weights_resident`` keeps every weight tensor in L2 for the whole
  block; otherwise a weight only lives during the step that reads it;
* ``residual_live`` keeps the block input alive to the end (the residual
  connection reads it after attention).

Layer-wise steps move whole tensors. The fused depth-first step streams
instead: an L2 region of Q, K or V is released as soon as its last
L2 -> L1 transfer completes, and M1 rows are allocated as they are
written back, so the attention map never appears in L2.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .block import FWSA, MHSA
from .tensor import AttnDims, tensor_bytes

LWT = "LWT"
DFT = "DFT"
UNTILED = "UNTILED"


class UntileableError(ValueError):
    """No tile of a step fits the L1 capacity."""


class DFTFallback(Exception):
    """Depth-first tiling does not fit L1 even with a single-row tile."""


@dataclass(frozen=True)
class MemConfig:
    l1_bytes: int = 128_000
    l2_bytes: int = 1_500_000
    cores: int = 8
    weights_resident: bool = True
    residual_live: bool = True
    count_biases: bool = False

    def __post_init__(self):
        if self.l1_bytes <= 0 or self.l2_bytes <= 0:
            raise ValueError("memory capacities must be positive")
        if self.l1_bytes >= self.l2_bytes:
            raise ValueError(f"L1 ({self.l1_bytes} B) must be smaller than L2 ({self.l2_bytes} B)")
        if self.cores < 1:
            raise ValueError("need at least one core")


# storage axis order of every L2 buffer, named with loop-axis symbols
STORAGE = {
    "X": ("S", "E"),
    "Q": ("H", "S", "P"),
    "K": ("H", "S", "P"),
    "V": ("H", "P", "S"),
    "A": ("S", "H", "S'"),
    "M1": ("S", "H", "P"),
    "OUT": ("S", "E"),
    "Wq": ("H", "P", "E"),
    "Wk": ("H", "P", "E"),
    "Wv": ("H", "P", "E"),
    "Wo": ("E", "HP"),
    "W_star": ("H", "E", "E'"),
}

WEIGHTS = ("Wq", "Wk", "Wv", "Wo", "W_star")


@dataclass(frozen=True)
class Operand:
    """A tensor read or written by a step.

    A tile of the operand spans the current tile range on each of
    ``axes`` and the full extent elsewhere; it holds ``unit`` bytes per
    element of those ranges.
    """

    name: str
    axes: tuple[str, ...]
    unit: int
    release: bool = False

    def tile_bytes(self, ranges: dict) -> int:
        n = self.unit
        for a in self.axes:
            lo, hi = ranges[a]
            n *= hi - lo
        return n

    def key(self, ranges: dict) -> tuple:
        return tuple(ranges[a] for a in self.axes)


@dataclass(frozen=True)
class Step:
    index: int
    kernel: str
    loop: tuple[str, ...]
    extents: dict
    tile: dict
    inputs: tuple[Operand, ...]
    output: Operand
    fused: bool = False
    scratch_unit: int = 0          # L1-only bytes per tile row-slab (A tile, M2 tile)
    scratch_axes: tuple[str, ...] = ()
    l1_bytes: int = 0
    frees: tuple[str, ...] = ()
    weights: tuple[str, ...] = ()

    def tiles(self):
        """Tile ranges in loop order, as dicts axis -> (lo, hi)."""
        spans = [[(lo, min(lo + self.tile[a], self.extents[a]))
                  for lo in range(0, self.extents[a], self.tile[a])] for a in self.loop]
        for combo in itertools.product(*spans):
            yield dict(zip(self.loop, combo))

    def scratch_bytes(self, ranges: dict) -> int:
        n = self.scratch_unit
        for a in self.scratch_axes:
            lo, hi = ranges[a]
            n *= hi - lo
        return n

    @property
    def n_tiles(self) -> int:
        return math.prod(math.ceil(self.extents[a] / self.tile[a]) for a in self.loop)

    def transfers(self) -> tuple[int, int]:
        """Planned (L2->L1, L1->L2) bytes: an input tile is fetched whenever
        its key differs from the previous iteration's."""
        last = {}
        bytes_in = bytes_out = 0
        for ranges in self.tiles():
            for i, op in enumerate(self.inputs):
                k = op.key(ranges)
                if last.get(i) != k:
                    bytes_in += op.tile_bytes(ranges)
                    last[i] = k
            bytes_out += self.output.tile_bytes(ranges)
        return bytes_in, bytes_out


@dataclass(frozen=True)
class TilingPlan:
    mode: str
    flavor: str
    dims: AttnDims
    cfg: MemConfig
    steps: tuple[Step, ...]
    sizes: dict = field(compare=False)
    dft_x: int | None = None

    @property
    def initial(self) -> tuple[str, ...]:
        live = ["X"]
        if self.cfg.weights_resident:
            live += [w for w in WEIGHTS if w in self.sizes]
        return tuple(live)


# --------------------------------------------------------------------------
# analytic sizes
# --------------------------------------------------------------------------

def buffer_sizes(dims: AttnDims, flavor: str, cfg: MemConfig) -> dict:
    """L2 bytes of every tensor the block touches."""
    E, P, H = dims.E, dims.P, dims.H
    bias = 2 if cfg.count_biases else 0
    sizes = {name: tensor_bytes(dims, name) for name in ("X", "V", "A", "M1", "OUT")}
    sizes["Wv"] = tensor_bytes(dims, "W_qkv_each") + bias * H * P
    sizes["Wo"] = tensor_bytes(dims, "W_out") + bias * E
    if flavor == MHSA:
        sizes["Q"] = tensor_bytes(dims, "Q")
        sizes["K"] = tensor_bytes(dims, "K")
        sizes["Wq"] = sizes["Wk"] = sizes["Wv"]
    else:
        sizes["W_star"] = tensor_bytes(dims, "W_star")
    return sizes


def mem_dft(x: int, dims: AttnDims) -> int:
    """L1 bytes of one depth-first head tile with ``x`` query rows:
    x rows of Q, an x-by-S slab of A and x rows of M1, plus the full K and
    V heads."""
    if not 1 <= x <= dims.S:
        raise ValueError(f"tile rows must be in [1, {dims.S}], got {x}")
    P, S = dims.P, dims.S
    return (2 * P + S) * x + 2 * P * S


def mem_dft_fwsa(x: int, dims: AttnDims) -> int:
    """Fused-weight variant: X, W*[h] and V[h] resident; per-row M2, A and M1."""
    if not 1 <= x <= dims.S:
        raise ValueError(f"tile rows must be in [1, {dims.S}], got {x}")
    S, E, P = dims.S, dims.E, dims.P
    return (E + S + P) * x + S * E + E * E + P * S


def choose_dft_x(dims: AttnDims, cfg: MemConfig, flavor: str = MHSA) -> int | None:
    """Largest row count whose fused tile fits L1, or None (fall back to LWT)."""
    S, E, P = dims.S, dims.E, dims.P
    if flavor == MHSA:
        fixed, per_row = 2 * P * S, 2 * P + S
    else:
        fixed, per_row = S * E + E * E + P * S, E + S + P
    x = (cfg.l1_bytes - fixed) // per_row
    if x < 1:
        return None
    return min(x, S)


# --------------------------------------------------------------------------
# step construction
# --------------------------------------------------------------------------

def _step_specs(dims: AttnDims, flavor: str, mode: str):
    """(kernel, loop, extents, inputs, output, scratch) in execution order."""
    S, E, P, H = dims.S, dims.E, dims.P, dims.H
    ext3 = {"H": H, "S": S, "P": P}
    ext2 = {"H": H, "S": S}

    def proj(name, out, w, loop):
        return dict(kernel=name, loop=loop, extents=ext3,
                    inputs=(Operand("X", ("S",), E), Operand(w, ("H", "P"), E)),
                    output=Operand(out, ("H", "S", "P"), 1), weights=(w,))

    gemm1 = dict(kernel="gemm1_softmax", loop=("H", "S"), extents=ext2,
                 inputs=(Operand("Q", ("H", "S"), P), Operand("K", ("H",), S * P)),
                 output=Operand("A", ("H", "S"), S))
    gemm2 = dict(kernel="gemm2", loop=("H", "S"), extents=ext2,
                 inputs=(Operand("A", ("H", "S"), S), Operand("V", ("H",), P * S)),
                 output=Operand("M1", ("H", "S"), P))
    fwsa = dict(kernel="fwsa", loop=("H", "S"), extents=ext2,
                inputs=(Operand("X", ("S",), E), Operand("X", (), S * E), Operand("W_star", ("H",), E * E)),
                output=Operand("A", ("H", "S"), S), scratch_unit=E, scratch_axes=("H", "S"),
                weights=("W_star",))
    out = dict(kernel="linear_out", loop=("S", "E"), extents={"S": S, "E": E},
               inputs=(Operand("M1", ("S",), H * P), Operand("Wo", ("E",), H * P)),
               output=Operand("OUT", ("S", "E"), 1), weights=("Wo",))
    linear_v = proj("linear_v", "V", "Wv", ("H", "P", "S"))

    if mode in (LWT, UNTILED):
        if flavor == MHSA:
            head = [proj("linear_q", "Q", "Wq", ("H", "S", "P")),
                    proj("linear_k", "K", "Wk", ("H", "S", "P")), gemm1]
        else:
            head = [fwsa]
        return head + [linear_v, gemm2, out]

    if flavor == MHSA:
        fused = dict(kernel="fused_attention", loop=("H", "S"), extents=ext2, fused=True,
                     inputs=(Operand("Q", ("H", "S"), P, release=True),
                             Operand("K", ("H",), S * P, release=True),
                             Operand("V", ("H",), P * S, release=True)),
                     output=Operand("M1", ("H", "S"), P), scratch_unit=S, scratch_axes=("S",))
        return [proj("linear_q", "Q", "Wq", ("H", "S", "P")),
                proj("linear_k", "K", "Wk", ("H", "S", "P")), linear_v, fused, out]
    fused = dict(kernel="fused_fwsa", loop=("H", "S"), extents=ext2, fused=True,
                 inputs=(Operand("X", (), S * E), Operand("W_star", ("H",), E * E),
                         Operand("V", ("H",), P * S, release=True)),
                 output=Operand("M1", ("H", "S"), P), scratch_unit=E + S, scratch_axes=("S",),
                 weights=("W_star",))
    return [linear_v, fused, out]


def _loads(loop, tile_counts: dict, axes) -> int:
    """How many times an operand is fetched under ``loop`` order."""
    dep = [i for i, a in enumerate(loop) if a in axes]
    if not dep:
        return 1
    return math.prod(tile_counts[a] for a in loop[:dep[-1] + 1])


def _working_set(spec: dict, tile: dict) -> tuple[int, int, int]:
    """(L1 bytes incl. double buffers, single-copy bytes, output tile bytes)."""
    loop, ext = spec["loop"], spec["extents"]
    ranges = {a: (0, tile[a]) for a in loop}
    counts = {a: math.ceil(ext[a] / tile[a]) for a in loop}
    single = total = 0
    for op in spec["inputs"] + (spec["output"],):
        b = op.tile_bytes(ranges)
        single += b
        streamed = _loads(loop, counts, op.axes if op is not spec["output"] else loop) > 1
        total += b * (2 if streamed and not spec.get("fused") else 1)
    scratch = spec.get("scratch_unit", 0)
    for a in spec.get("scratch_axes", ()):
        scratch *= tile[a]
    return total + scratch, single + scratch, spec["output"].tile_bytes(ranges)


def _choose_tile(spec: dict, l1: int) -> tuple[dict, int]:
    """Largest-footprint tile that fits: maximize bytes held in L1, then
    the output tile, then head and row extents (outer axes first)."""
    loop, ext = spec["loop"], spec["extents"]
    grids = np.meshgrid(*[np.arange(1, ext[a] + 1, dtype=np.int64) for a in loop], indexing="ij")
    t = {a: g.ravel() for a, g in zip(loop, grids)}
    counts = {a: -(-ext[a] // t[a]) for a in loop}
    output = spec["output"]
    ws = np.zeros_like(t[loop[0]])
    single = np.zeros_like(ws)
    for op in spec["inputs"] + (output,):
        b = np.full_like(ws, op.unit)
        for a in op.axes:
            b = b * t[a]
        axes = loop if op is output else op.axes
        dep = [i for i, a in enumerate(loop) if a in axes]
        loads = np.ones_like(ws)
        if dep:
            for a in loop[:dep[-1] + 1]:
                loads = loads * counts[a]
        streamed = (loads > 1) & (not spec.get("fused"))
        single += b
        ws += np.where(streamed, 2 * b, b)
    scratch = np.full_like(ws, spec.get("scratch_unit", 0))
    for a in spec.get("scratch_axes", ()):
        scratch = scratch * t[a]
    ws += scratch
    single += scratch
    out_b = np.full_like(ws, output.unit)
    for a in output.axes:
        out_b = out_b * t[a]
    ok = np.flatnonzero(ws <= l1)
    if ok.size == 0:
        raise UntileableError(f"{spec['kernel']}: smallest tile does not fit {l1} B of L1")
    # lexsort: last key is primary
    keys = [t[a][ok] for a in reversed(loop)] + [out_b[ok], single[ok]]
    best = ok[np.lexsort(keys)[-1]]
    return {a: int(t[a][best]) for a in loop}, int(ws[best])


def _with_liveness(steps: list[Step], cfg: MemConfig) -> tuple[Step, ...]:
    last_use = {}
    for s in steps:
        for op in s.inputs:
            last_use[op.name] = s.index
    out = []
    for s in steps:
        dead = [n for n, i in last_use.items() if i == s.index and n not in WEIGHTS]
        if cfg.residual_live and "X" in dead:
            dead.remove("X")
        out.append(replace(s, frees=tuple(sorted(dead))))
    return tuple(out)


def _build(dims: AttnDims, cfg: MemConfig, flavor: str, mode: str, x: int | None = None) -> TilingPlan:
    if flavor not in (MHSA, FWSA):
        raise ValueError(f"unknown flavor {flavor!r}")
    steps = []
    for i, spec in enumerate(_step_specs(dims, flavor, mode)):
        if mode == UNTILED:
            tile, l1 = dict(spec["extents"]), 0
        elif spec.get("fused"):
            tile = {"H": 1, "S": x}
            l1 = (mem_dft if flavor == MHSA else mem_dft_fwsa)(x, dims)
        else:
            tile, l1 = _choose_tile(spec, cfg.l1_bytes)
        steps.append(Step(index=i, kernel=spec["kernel"], loop=spec["loop"], extents=spec["extents"],
                          tile=tile, inputs=spec["inputs"], output=spec["output"],
                          fused=spec.get("fused", False), scratch_unit=spec.get("scratch_unit", 0),
                          scratch_axes=spec.get("scratch_axes", ()), l1_bytes=l1,
                          weights=spec.get("weights", ())))
    return TilingPlan(mode=mode, flavor=flavor, dims=dims, cfg=cfg, steps=_with_liveness(steps, cfg),
                      sizes=buffer_sizes(dims, flavor, cfg), dft_x=x)


def plan_lwt(dims: AttnDims, cfg: MemConfig, flavor: str = MHSA) -> TilingPlan:
    """Layer-wise plan: Q, K, GEMM1+softmax, V, GEMM2, output projection
    (FWSA: fused map, V, GEMM2, output), each tiled on its own."""
    return _build(dims, cfg, flavor, LWT)


def plan_dft(dims: AttnDims, cfg: MemConfig, flavor: str = MHSA) -> TilingPlan:
    """Depth-first plan: projections first, then per head and per x-row
    tile the two GEMMs and the softmax run back to back into M1 rows."""
    x = choose_dft_x(dims, cfg, flavor)
    if x is None:
        raise DFTFallback(f"fused tile with one row needs more than {cfg.l1_bytes} B of L1")
    return _build(dims, cfg, flavor, DFT, x)


def plan_untiled(dims: AttnDims, cfg: MemConfig, flavor: str = MHSA) -> TilingPlan:
    """Layer-wise order with every layer as one whole-tensor tile (no L1)."""
    return _build(dims, cfg, flavor, UNTILED)


def plan_auto(dims: AttnDims, cfg: MemConfig, flavor: str = MHSA) -> tuple[TilingPlan, str]:
    """Prefer depth-first tiling when it fits L1 and lowers the L2 peak."""
    lwt = plan_lwt(dims, cfg, flavor)
    try:
        dft = plan_dft(dims, cfg, flavor)
    except DFTFallback as exc:
        return lwt, f"LWT fallback: {exc}"
    p_lwt = memory_timeline(lwt).peak
    p_dft = memory_timeline(dft).peak
    if p_dft < p_lwt:
        return dft, f"DFT with x={dft.dft_x}: peak {p_dft} B < LWT peak {p_lwt} B"
    return lwt, f"LWT: DFT fits (x={dft.dft_x}) but peak {p_dft} B >= LWT peak {p_lwt} B"


# --------------------------------------------------------------------------
# L2 timeline
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StepMemory:
    index: int
    kernel: str
    peak: int
    live: dict          # buffer -> bytes at the step's peak


@dataclass(frozen=True)
class MemoryTimeline:
    steps: tuple[StepMemory, ...]
    allocated: int
    freed: int

    @property
    def peak(self) -> int:
        return max((s.peak for s in self.steps), default=0)

    @property
    def peak_step(self) -> StepMemory | None:
        return max(self.steps, key=lambda s: s.peak, default=None)


def last_loads(step: Step) -> list[set]:
    """For each input operand, the tile indices carrying its final fetch of a key."""
    final = [dict() for _ in step.inputs]
    for t, ranges in enumerate(step.tiles()):
        for i, op in enumerate(step.inputs):
            final[i][op.key(ranges)] = t
    return [set(d.values()) for d in final]


def memory_timeline(plan: TilingPlan, dims: AttnDims | None = None, cfg: MemConfig | None = None) -> MemoryTimeline:
    """Replay the plan's allocation events and record each step's L2 peak."""
    sizes = plan.sizes
    live = {}
    counters = {"alloc": 0, "free": 0}

    def alloc(name, n):
        live[name] = live.get(name, 0) + n
        counters["alloc"] += n

    def release(name, n):
        live[name] -= n
        counters["free"] += n
        if live[name] == 0:
            del live[name]

    records = []
    if plan.steps:
        for name in plan.initial:
            alloc(name, sizes[name])
    for step in plan.steps:
        best = {"peak": -1, "live": {}}

        def mark():
            total = sum(live.values())
            if total > best["peak"]:
                best["peak"], best["live"] = total, dict(live)

        if not plan.cfg.weights_resident:
            for w in step.weights:
                alloc(w, sizes[w])
        if step.fused:
            mark()
            finals = last_loads(step)
            for t, ranges in enumerate(step.tiles()):
                for i, op in enumerate(step.inputs):
                    if op.release and t in finals[i] and op.name in live:
                        release(op.name, op.tile_bytes(ranges))
                alloc(step.output.name, step.output.tile_bytes(ranges))
                mark()
        else:
            alloc(step.output.name, sizes[step.output.name])
            mark()
        for name in step.frees:
            if name in live:
                release(name, live[name])
        if not plan.cfg.weights_resident:
            for w in step.weights:
                release(w, sizes[w])
        records.append(StepMemory(step.index, step.kernel, best["peak"], best["live"]))
    for name in list(live):
        release(name, live[name])
    return MemoryTimeline(tuple(records), counters["alloc"], counters["free"])


# --------------------------------------------------------------------------
# fused-tile L1 liveness
# --------------------------------------------------------------------------

def fused_tile_l1_peak(x: int, S: int, P: int) -> int:
    """Peak L1 bytes of one depth-first head tile, replayed op by op.

    The tile runs row by row: a logits row from Q[r] and K, softmax in
    place, then an M row from A[r] and V. An L1 buffer comes to life at
    its first write (a DMA or a kernel store) and is held until the tile
    boundary, where the next tile's transfers reuse it.
    """
    shapes = {"K": (S, P), "V": (S, P), "Q": (x, P), "A": (x, S), "M": (x, P)}
    program = [("dma", "K"), ("dma", "V"), ("dma", "Q")]
    for r in range(x):
        program += [("gemm1_row", "A"), ("softmax_row", "A"), ("gemm2_row", "M")]
    program.append(("dma_out", None))
    live, peak = {}, 0
    for op, dst in program:
        if dst is not None and dst not in live:
            rows, cols = shapes[dst]
            live[dst] = rows * cols
        peak = max(peak, sum(live.values()))
    live.clear()
    return peak


# --------------------------------------------------------------------------
# reporting
# --------------------------------------------------------------------------

def format_plan(plan: TilingPlan, timeline: MemoryTimeline | None = None) -> str:
    timeline = timeline or memory_timeline(plan)
    lines = [f"# {plan.flavor} {plan.mode} plan for {plan.dims}"
             + (f" (x={plan.dft_x})" if plan.dft_x else ""),
             f"{'step':>4} {'kernel':<16} {'tile':<22} {'tiles':>5} {'in B':>9} {'out B':>8} "
             f"{'L1 B':>8} {'L2 peak B':>10}  live at peak"]
    for step, mem in zip(plan.steps, timeline.steps):
        bin_, bout = step.transfers()
        tile = ",".join(f"{a}={step.tile[a]}" for a in step.loop)
        live = " ".join(f"{k}:{v}" for k, v in sorted(mem.live.items()))
        lines.append(f"{step.index:>4} {step.kernel:<16} {tile:<22} {step.n_tiles:>5} {bin_:>9} {bout:>8} "
                     f"{step.l1_bytes:>8} {mem.peak:>10}  {live}")
    lines.append(f"peak L2 = {timeline.peak} B ({timeline.peak / 1000:.1f} KB)")
    return "\n".join(lines)
