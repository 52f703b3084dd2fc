"""Functional execution of attention plans over a simulated L1/L2 memory.

The simulator moves real int8 data between an L2 store and L1 tile
buffers and counts every byte it moves. It is not cycle accurate;
:func:`cost_estimate` is a separate trend model.
"""

from __future__ import annotations

from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .block import MHSA, AttentionBlock
from .kernels import SOFTMAX_OUT_EXP, LinearWeights
from .planner import STORAGE, UNTILED, MemConfig, Step, TilingPlan
from .tensor import Layout, QuantTensor, ShapeError


class CapacityError(RuntimeError):
    """A simulated memory level overflowed."""


class WorkingSetViolation(RuntimeError):
    """A plan step needed more L1 than available."""

    def __init__(self, step: int, need: int, cap: int):
        super().__init__(f"step {step}: L1 working set {need} B exceeds {cap} B")
        self.step = step


class SimMemory:
    """Byte-level occupancy tracker for one memory level."""

    def __init__(self, name: str, capacity: int | None, on_overflow=None):
        self.name = name
        self.capacity = capacity
        self.live: dict = {}
        self.peak = 0
        self.max_by_tag: dict = {}
        self.allocated = 0
        self.freed = 0
        self._on_overflow = on_overflow

    @property
    def used(self) -> int:
        return sum(self.live.values())

    def alloc(self, tag, n: int):
        self.live[tag] = self.live.get(tag, 0) + n
        self.allocated += n
        used = self.used
        self.peak = max(self.peak, used)
        self.max_by_tag[tag] = max(self.max_by_tag.get(tag, 0), self.live[tag])
        if self.capacity is not None and used > self.capacity:
            if self._on_overflow is not None:
                self._on_overflow(used)
            raise CapacityError(f"{self.name}: {used} B exceeds capacity {self.capacity} B")

    def release(self, tag, n: int):
        if n > self.live.get(tag, 0):
            raise RuntimeError(f"{self.name}: releasing {n} B of {tag!r} which holds {self.live.get(tag, 0)} B")
        self.live[tag] -= n
        self.freed += n
        if self.live[tag] == 0:
            del self.live[tag]

    def free(self, tag):
        if tag in self.live:
            self.release(tag, self.live[tag])

    def free_all(self):
        for tag in list(self.live):
            self.free(tag)


@dataclass
class ExecStats:
    macs: dict = field(default_factory=dict)
    l2_to_l1: int = 0
    l1_to_l2: int = 0
    peak_l1: int = 0
    peak_l2: int = 0
    steps: int = 0
    worker_slices: dict = field(default_factory=dict)
    l2_by_buffer: dict = field(default_factory=dict)   # max bytes ever held per L2 buffer

    @property
    def total_macs(self) -> int:
        return sum(self.macs.values())

    def add_macs(self, kernel: str, n: int):
        self.macs[kernel] = self.macs.get(kernel, 0) + int(n)

    def as_report(self, prefix: str = "") -> dict:
        rep = {f"{prefix}macs.{k}": v for k, v in sorted(self.macs.items())}
        rep.update({f"{prefix}macs_total": self.total_macs, f"{prefix}l2_to_l1_bytes": self.l2_to_l1,
                    f"{prefix}l1_to_l2_bytes": self.l1_to_l2, f"{prefix}peak_l1_bytes": self.peak_l1,
                    f"{prefix}peak_l2_bytes": self.peak_l2, f"{prefix}steps": self.steps})
        for k, sizes in sorted(self.worker_slices.items()):
            rep[f"{prefix}slices.{k}"] = ",".join(str(s) for s in sizes)
        return rep


def _weights_data(block: AttentionBlock) -> dict:
    data = {"Wv": block.wv.w.data, "Wo": block.wo.w.data}
    if block.flavor == MHSA:
        data.update(Wq=block.wq.w.data, Wk=block.wk.w.data)
    else:
        data["W_star"] = block.w_star.data
    return data


def _check_input(block: AttentionBlock, X: QuantTensor):
    d = block.dims
    if X.shape != (d.S, d.E):
        raise ShapeError(f"input must be ({d.S}, {d.E}), got {X.shape}")
    if X.scale_exp != block.exps["x"]:
        raise ShapeError(f"input scale 2^-{X.scale_exp} does not match the block's 2^-{block.exps['x']}")


# --------------------------------------------------------------------------
# untiled reference path
# --------------------------------------------------------------------------

def run_untiled(block: AttentionBlock, X: QuantTensor, cfg: MemConfig | None = None):
    """Whole-tensor kernels in layer order, with L2 occupancy checked."""
    _check_input(block, X)
    cfg = cfg or MemConfig()
    d, e = block.dims, block.exps
    stats = ExecStats()
    l2 = SimMemory("L2", cfg.l2_bytes)
    weights = {k: v.nbytes for k, v in _weights_data(block).items()}
    l2.alloc("X", X.nbytes)
    if cfg.weights_resident:
        for k, n in weights.items():
            l2.alloc(k, n)

    def produce(name, fn, wname=None):
        if wname and not cfg.weights_resident:
            l2.alloc(wname, weights[wname])
        t = fn()
        l2.alloc(name, t.nbytes)
        if wname and not cfg.weights_resident:
            l2.free(wname)
        stats.steps += 1
        return t

    S, E, P, H = d.S, d.E, d.P, d.H
    if block.flavor == MHSA:
        Q = produce("Q", lambda: K.linear_irl(X, block.wq, e["q"]), "Wq")
        Kt = produce("K", lambda: K.linear_irl(X, block.wk, e["k"]), "Wk")
        A = produce("A", lambda: K.matmul_softmax(Q, Kt, block.rp_logits, e["logit"]))
        l2.free("Q")
        l2.free("K")
        stats.add_macs("linear_q", H * S * P * E)
        stats.add_macs("linear_k", H * S * P * E)
        stats.add_macs("gemm1", H * S * S * P)
    else:
        A = produce("A", lambda: K.fwsa_fused(X, block.w_star, block.rp_m2, e["m2"], block.rp_logits,
                                              e["logit"]), "W_star")
        stats.add_macs("fwsa_m2", H * S * E * E)
        stats.add_macs("fwsa_logits", H * S * S * E)
    V = produce("V", lambda: K.linear_wrl(X, block.wv, e["v"]), "Wv")
    M1 = produce("M1", lambda: K.matmul_m2(A, V, block.rp_m1, e["m1"]))
    l2.free("A")
    l2.free("V")
    if not cfg.residual_live:
        l2.free("X")
    out = produce("OUT", lambda: K.linear_out(M1, block.wo, e["out"]), "Wo")
    stats.add_macs("linear_v", H * S * P * E)
    stats.add_macs("gemm2", H * S * S * P)
    stats.add_macs("linear_out", S * E * H * P)
    stats.peak_l2 = l2.peak
    stats.l2_by_buffer = dict(l2.max_by_tag)
    l2.free_all()
    return out, stats


# --------------------------------------------------------------------------
# tiled path
# --------------------------------------------------------------------------

def _storage_shape(name: str, block: AttentionBlock) -> tuple:
    d = block.dims
    ext = {"S": d.S, "E": d.E, "P": d.P, "H": d.H, "S'": d.S, "E'": d.E, "HP": d.H * d.P}
    return tuple(ext[a] for a in STORAGE[name])


def _region(name: str, axes, ranges) -> tuple:
    return tuple(slice(*ranges[a]) if a in axes else slice(None) for a in STORAGE[name])


def _tile_compute(step: Step, block: AttentionBlock, tiles: list, ranges: dict, stats: ExecStats):
    """Run one tile of ``step`` on its L1 operand copies; returns the output tile."""
    e, d = block.exps, block.dims
    kind = step.kernel
    qt = QuantTensor
    if kind in ("linear_q", "linear_k", "linear_v"):
        x, w = tiles
        src = {"linear_q": block.wq, "linear_k": block.wk, "linear_v": block.wv}[kind]
        (h0, h1), (p0, p1) = ranges["H"], ranges["P"]
        lw = LinearWeights(qt(w, Layout.HPE, src.w.scale_exp), src.head_slice(h0, h1, p0, p1).rp)
        X = qt(x, Layout.SE, e["x"])
        stats.add_macs(kind, w.shape[0] * w.shape[1] * x.size)
        if kind == "linear_v":
            return K.linear_wrl(X, lw, e["v"]).data
        return K.linear_irl(X, lw, e[kind[-1]]).data
    if kind == "gemm1_softmax":
        q, k = tiles
        stats.add_macs("gemm1", q.shape[0] * q.shape[1] * k.shape[1] * q.shape[2])
        return K.matmul_softmax(qt(q, Layout.HSP, e["q"]), qt(k, Layout.HSP, e["k"]),
                                block.rp_logits, e["logit"]).data
    if kind == "gemm2":
        a, v = tiles
        stats.add_macs("gemm2", a.size * v.shape[1])
        return K.matmul_m2(qt(a, Layout.SHS, SOFTMAX_OUT_EXP), qt(v, Layout.HPS, e["v"]),
                           block.rp_m1, e["m1"]).data
    if kind == "linear_out":
        m, w = tiles
        e0, e1 = ranges["E"]
        lw = LinearWeights(qt(w, Layout.E_HP, block.wo.w.scale_exp), block.wo.row_slice(e0, e1).rp)
        stats.add_macs("linear_out", m.shape[0] * w.size)
        return K.linear_out(qt(m, Layout.SHP, e["m1"]), lw, e["out"]).data
    if kind in ("fwsa", "fused_fwsa"):
        if kind == "fwsa":
            rows, keys, ws = tiles
        else:
            keys, ws, v = tiles
            rows = keys[slice(*ranges["S"])]
        h, x, E, S = ws.shape[0], rows.shape[0], d.E, keys.shape[0]
        stats.add_macs("fwsa_m2", h * x * E * E)
        stats.add_macs("fwsa_logits", h * x * S * E)
        A = K.fwsa_fused(qt(rows, Layout.SE, e["x"]), qt(ws, Layout.HEE, block.w_star.scale_exp),
                         block.rp_m2, e["m2"], block.rp_logits, e["logit"], X_keys=qt(keys, Layout.SE, e["x"]))
        if kind == "fwsa":
            return A.data
        stats.add_macs("gemm2", A.data.size * v.shape[1])
        return K.matmul_m2(A, qt(v, Layout.HPS, e["v"]), block.rp_m1, e["m1"]).data
    if kind == "fused_attention":
        q, k, v = tiles
        stats.add_macs("gemm1", q.shape[0] * q.shape[1] * k.shape[1] * q.shape[2])
        A = K.matmul_softmax(qt(q, Layout.HSP, e["q"]), qt(k, Layout.HSP, e["k"]), block.rp_logits, e["logit"])
        stats.add_macs("gemm2", A.data.size * v.shape[1])
        return K.matmul_m2(A, qt(v, Layout.HPS, e["v"]), block.rp_m1, e["m1"]).data
    raise ValueError(f"unknown step kernel {kind!r}")


def run_tiled(plan: TilingPlan, block: AttentionBlock, X: QuantTensor):
    """Execute ``plan`` tile by tile; output must equal :func:`run_untiled`."""
    _check_input(block, X)
    if plan.dims != block.dims or plan.flavor != block.flavor:
        raise ShapeError(f"plan is for {plan.flavor} {plan.dims}, block is {block.flavor} {block.dims}")
    cfg = plan.cfg
    stats = ExecStats()
    store = {"X": X.data, **_weights_data(block)}
    l2 = SimMemory("L2", cfg.l2_bytes)
    check_l1 = plan.mode != UNTILED
    l2.alloc("X", X.nbytes)
    if cfg.weights_resident:
        for w in ("Wq", "Wk", "Wv", "Wo", "W_star"):
            if w in store:
                l2.alloc(w, store[w].nbytes)

    for step in plan.steps:
        stats.steps += 1

        def overflow(used, _step=step):
            raise WorkingSetViolation(_step.index, used, cfg.l1_bytes)

        l1 = SimMemory("L1", cfg.l1_bytes if check_l1 else None, overflow)
        if not cfg.weights_resident:
            for w in step.weights:
                l2.alloc(w, store[w].nbytes)
        out_name = step.output.name
        store[out_name] = np.zeros(_storage_shape(out_name, block), dtype=np.int8)
        if not step.fused:
            l2.alloc(out_name, store[out_name].nbytes)

        all_tiles = list(step.tiles())
        # fetch schedule: which tiles fetch each operand, and the final fetch per key
        fetches = [[] for _ in step.inputs]
        prev = [None] * len(step.inputs)
        for t, ranges in enumerate(all_tiles):
            for i, op in enumerate(step.inputs):
                k = op.key(ranges)
                if k != prev[i]:
                    fetches[i].append(t)
                    prev[i] = k
        final_fetch = []
        for i, op in enumerate(step.inputs):
            last = {op.key(all_tiles[t]): t for t in fetches[i]}
            final_fetch.append(set(last.values()))
        n_slots = [1 if step.fused or len(f) <= 1 else 2 for f in fetches]
        out_slots = 1 if step.fused or len(all_tiles) <= 1 else 2
        slots = [deque() for _ in step.inputs]
        out_q = deque()
        fetch_sets = [set(f) for f in fetches]
        l1_copy = [None] * len(step.inputs)

        for t, ranges in enumerate(all_tiles):
            for i, op in enumerate(step.inputs):
                if t not in fetch_sets[i]:
                    continue
                data = np.array(store[op.name][_region(op.name, op.axes, ranges)])
                if len(slots[i]) == n_slots[i]:
                    l1.release(("in", i), slots[i].popleft())
                l1.alloc(("in", i), data.nbytes)
                slots[i].append(data.nbytes)
                stats.l2_to_l1 += data.nbytes
                l1_copy[i] = data
                if op.release and t in final_fetch[i]:
                    l2.release(op.name, data.nbytes)
            scratch = step.scratch_bytes(ranges)
            l1.alloc("scratch", scratch)
            out_bytes = step.output.tile_bytes(ranges)
            if len(out_q) == out_slots:
                l1.release("out", out_q.popleft())
            l1.alloc("out", out_bytes)
            out_q.append(out_bytes)
            tile_out = _tile_compute(step, block, l1_copy, ranges, stats)
            if tile_out.nbytes != out_bytes:
                raise RuntimeError(f"step {step.index}: output tile {tile_out.shape} does not match plan")
            store[out_name][_region(out_name, step.output.axes, ranges)] = tile_out
            stats.l1_to_l2 += out_bytes
            if step.fused:
                l2.alloc(out_name, out_bytes)
            l1.release("scratch", scratch)
        stats.peak_l1 = max(stats.peak_l1, l1.peak)
        for name in step.frees:
            l2.free(name)
        if not cfg.weights_resident:
            for w in step.weights:
                l2.free(w)
    stats.peak_l2 = l2.peak
    stats.l2_by_buffer = dict(l2.max_by_tag)
    l2.free_all()
    if l2.allocated != l2.freed:
        raise RuntimeError("L2 accounting does not balance")
    return QuantTensor(store["OUT"], Layout.SE_out, block.exps["out"]), stats


# --------------------------------------------------------------------------
# multi-worker path
# --------------------------------------------------------------------------

def chunk_bounds(n: int, workers: int, worker_id: int) -> tuple[int, int]:
    """Static chunking: C = ceil(n / workers), start = min(C*id, n)."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    c = -(-n // workers)
    start = min(c * worker_id, n)
    return start, min(start + c, n)


def run_parallel(block: AttentionBlock, X: QuantTensor, workers: int, threads: bool = False):
    """Untiled execution with every kernel split across ``workers``.

    Projections, attention GEMMs and the fused map are split over heads,
    the output projection over rows. Each worker writes a disjoint output
    slice, so the result does not depend on the interleaving; with
    ``threads`` the slices run on a thread pool, otherwise in worker-id
    order.
    """
    _check_input(block, X)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    d, e = block.dims, block.exps
    stats = ExecStats()

    def split(name: str, n: int, fn):
        bounds = [chunk_bounds(n, workers, w) for w in range(workers)]
        stats.worker_slices[name] = [b - a for a, b in bounds]
        jobs = [(a, b) for a, b in bounds if b > a]
        if threads and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
                list(pool.map(lambda ab: fn(*ab), jobs))
        else:
            for a, b in jobs:
                fn(a, b)
        stats.steps += 1

    def proj(name, lw, out_exp, wrl=False):
        shape = (d.H, d.P, d.S) if wrl else (d.H, d.S, d.P)
        out = np.empty(shape, dtype=np.int8)

        def part(h0, h1):
            k = K.linear_wrl if wrl else K.linear_irl
            out[h0:h1] = k(X, lw.head_slice(h0, h1), out_exp).data

        split(name, d.H, part)
        stats.add_macs(name, d.H * d.S * d.P * d.E)
        return QuantTensor(out, Layout.HPS if wrl else Layout.HSP, out_exp)

    A = np.empty((d.S, d.H, d.S), dtype=np.int8)
    if block.flavor == MHSA:
        Q = proj("linear_q", block.wq, e["q"])
        Kt = proj("linear_k", block.wk, e["k"])

        def g1(h0, h1):
            A[:, h0:h1] = K.matmul_softmax(QuantTensor(Q.data[h0:h1], Layout.HSP, e["q"]),
                                           QuantTensor(Kt.data[h0:h1], Layout.HSP, e["k"]),
                                           block.rp_logits, e["logit"]).data

        split("gemm1", d.H, g1)
        stats.add_macs("gemm1", d.H * d.S * d.S * d.P)
    else:
        def fw(h0, h1):
            ws = QuantTensor(block.w_star.data[h0:h1], Layout.HEE, block.w_star.scale_exp)
            A[:, h0:h1] = K.fwsa_fused(X, ws, block.rp_m2, e["m2"], block.rp_logits, e["logit"]).data

        split("fwsa", d.H, fw)
        stats.add_macs("fwsa_m2", d.H * d.S * d.E * d.E)
        stats.add_macs("fwsa_logits", d.H * d.S * d.S * d.E)
    V = proj("linear_v", block.wv, e["v"], wrl=True)
    M1 = np.empty((d.S, d.H, d.P), dtype=np.int8)

    def g2(h0, h1):
        M1[:, h0:h1] = K.matmul_m2(QuantTensor(A[:, h0:h1], Layout.SHS, SOFTMAX_OUT_EXP),
                                   QuantTensor(V.data[h0:h1], Layout.HPS, e["v"]), block.rp_m1, e["m1"]).data

    split("gemm2", d.H, g2)
    stats.add_macs("gemm2", d.H * d.S * d.S * d.P)
    out = np.empty((d.S, d.E), dtype=np.int8)

    def lo(s0, s1):
        out[s0:s1] = K.linear_out(QuantTensor(M1[s0:s1], Layout.SHP, e["m1"]), block.wo, e["out"]).data

    split("linear_out", d.S, lo)
    stats.add_macs("linear_out", d.S * d.E * d.H * d.P)
    return QuantTensor(out, Layout.SE_out, e["out"]), stats


# --------------------------------------------------------------------------
# analytic cost trend model
# --------------------------------------------------------------------------

LOOP_OVERHEAD = 8          # cycles per output element outside the inner product
SOFTMAX_CYCLES = 12        # cycles per softmax input element
DMA_BYTES_PER_CYCLE = 8
SOFTMAX_STEPS = ("gemm1_softmax", "fwsa", "fused_attention", "fused_fwsa")


@dataclass(frozen=True)
class CostEstimate:
    mac_cycles: float
    softmax_cycles: float
    transfer_cycles: float
    macs: int

    @property
    def total(self) -> float:
        return self.mac_cycles + self.softmax_cycles + self.transfer_cycles

    @property
    def softmax_share(self) -> float:
        return self.softmax_cycles / self.total if self.total else 0.0

    @property
    def throughput(self) -> float:
        """MACs per estimated cycle."""
        return self.macs / self.total if self.total else 0.0


def step_work(step: Step, dims) -> list[tuple[int, int]]:
    """(MACs, reduction length) pairs for the kernels inside a step."""
    S, E, P, H = dims.S, dims.E, dims.P, dims.H
    table = {
        "linear_q": [(H * S * P * E, E)], "linear_k": [(H * S * P * E, E)], "linear_v": [(H * S * P * E, E)],
        "gemm1_softmax": [(H * S * S * P, P)], "gemm2": [(H * S * S * P, S)],
        "linear_out": [(S * E * H * P, H * P)],
        "fwsa": [(H * S * E * E, E), (H * S * S * E, E)],
        "fused_attention": [(H * S * S * P, P), (H * S * S * P, S)],
        "fused_fwsa": [(H * S * E * E, E), (H * S * S * E, E), (H * S * S * P, S)],
    }
    return table[step.kernel]


def cost_estimate(plan: TilingPlan, dims=None, cfg: MemConfig | None = None, simd_width: int = 4) -> CostEstimate:
    """Trend model: MACs / (simd * cores * util(L)) with util(L) = L / (L + overhead),
    softmax linear in S per row, and DMA time not hidden behind compute."""
    dims = dims or plan.dims
    cfg = cfg or plan.cfg
    lanes = simd_width * cfg.cores
    mac_c = sm_c = xfer_c = 0.0
    macs = 0
    for step in plan.steps:
        mac = sum(n / (lanes * (L / (L + LOOP_OVERHEAD))) for n, L in step_work(step, dims))
        macs += sum(n for n, _ in step_work(step, dims))
        sm = 0.0
        if step.kernel in SOFTMAX_STEPS:
            sm = dims.H * dims.S * dims.S * SOFTMAX_CYCLES / cfg.cores
        mac_c += mac
        sm_c += sm
        bin_, bout = step.transfers()
        xfer_c += max(0.0, (bin_ + bout) / DMA_BYTES_PER_CYCLE - (mac + sm))
    return CostEstimate(mac_c, sm_c, xfer_c, macs)
