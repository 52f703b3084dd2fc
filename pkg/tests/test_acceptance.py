"""Acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (visible with
``pytest -s``); the pytest verdict is the pass/fail record.
"""

import itertools
import math
import time

import numpy as np

from _cases import KERNELS, case
from tinyattn import kernels as K
from tinyattn import published
from tinyattn.block import FWSA, MHSA, quantize_block, random_float_weights, random_input
from tinyattn.executor import chunk_bounds, cost_estimate, run_parallel, run_tiled, run_untiled
from tinyattn.fwsa import count_block_ops, count_params, cost_report, fuse_weights, fwsa_beneficial
from tinyattn.oracle import float_fwsa, float_mhsa
from tinyattn.planner import (DFTFallback, MemConfig, UntileableError, fused_tile_l1_peak, mem_dft,
                              memory_timeline, plan_dft, plan_lwt)
from tinyattn.tensor import ECG, EEG, TR, AttnDims

SHAPES = {"eeg": EEG, "ecg": ECG, "tr": TR}


def record(n, ok, detail):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


def make(dims, flavor=MHSA, seed=0):
    block = quantize_block(random_float_weights(dims, seed), random_input(dims, seed), flavor)
    return block, block.quantize_input(random_input(dims, seed + 100))


def test_c01_kernels_bit_exact_against_naive_oracle():
    rng = np.random.default_rng(20240101)
    per_kernel = 120
    t0 = time.perf_counter()
    bad = []
    for kind in KERNELS:
        for _ in range(per_kernel):
            got, ref = case(kind, rng)
            if got.shape != ref.shape or not np.array_equal(got, ref):
                bad.append(kind)
    dt = time.perf_counter() - t0
    n = per_kernel * len(KERNELS)
    record(1, not bad and dt < 120, f"{n} instances, {len(bad)} mismatches, max 0 LSB, {dt:.1f}s")


def test_c02_tiled_equals_untiled():
    runs = skipped = 0
    bad = []
    for (name, d), flavor in itertools.product(SHAPES.items(), (MHSA, FWSA)):
        block, X = make(d, flavor)
        ref, _ = run_untiled(block, X)
        for l1 in (1_000, 8_000, 64_000, 128_000):
            cfg = MemConfig(l1_bytes=l1)
            for make_plan in (plan_lwt, plan_dft):
                try:
                    plan = make_plan(d, cfg, flavor)
                except (UntileableError, DFTFallback):
                    skipped += 1
                    continue
                out, _ = run_tiled(plan, block, X)
                runs += 1
                if out != ref:
                    bad.append((name, flavor, plan.mode, l1))
    record(2, not bad and runs > 0, f"{runs} tiled runs bit-exact, {skipped} not applicable, mismatches {bad}")


def test_c03_fused_weight_float_equivalence():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        S, E, P = (int(v) for v in rng.integers(1, 17, size=3))
        H = int(rng.integers(1, 5))
        X = rng.normal(size=(S, E))
        Wq, Wk, Wv = (rng.normal(size=(H, E, P)) / math.sqrt(E) for _ in range(3))
        Wo = rng.normal(size=(H * P, E)) / math.sqrt(H * P)
        a = float_mhsa(X, Wq, Wk, Wv, Wo)
        b = float_fwsa(X, fuse_weights(Wq, Wk), Wv, Wo)
        worst = max(worst, float(np.abs(a - b).max()))
    record(3, worst <= 1e-5, f"max |mhsa - fwsa| = {worst:.2e} over 1000 instances")


def test_c04_fused_weight_mac_reduction():
    red = {n: -100 * cost_report(d).mac_change for n, d in SHAPES.items()}
    ok = abs(red["eeg"] - 11.0) <= 0.3 and abs(red["tr"] - 23.2) <= 0.3
    m, f = count_block_ops(ECG)
    note = (f"ECG computed {100 * (f - m) / m:+.2f}% vs published "
            f"{100 * published.MAC_CHANGE['ecg']:+.0f}% (not reproduced, see decisions ledger)")
    record(4, ok, f"EEG -{red['eeg']:.2f}%, TR -{red['tr']:.2f}%; {note}")


def test_c05_crossover_points():
    flags = {E: fwsa_beneficial(AttnDims(32, E, 32, 1)) for E in (51, 52, 63, 64)}
    ok = flags[51][0] and not flags[52][0] and flags[63][1] and not flags[64][1]
    record(5, ok, f"op flag 51/52 = {flags[51][0]}/{flags[52][0]}, "
                  f"param flag 63/64 = {flags[63][1]}/{flags[64][1]}")


def test_c06_param_ratio_when_e_equals_p():
    ratios = set()
    for E, S, H in itertools.product((1, 2, 7, 16, 32, 100), (1, 5, 81), (1, 3, 8)):
        _, _, pm, pf = count_params(AttnDims(S, E, E, H))
        ratios.add(pf / pm)
    record(6, ratios == {0.75}, f"ratios {sorted(ratios)}")


def test_c07_memory_peaks():
    cfg = MemConfig()
    peak = {}
    for (name, d), flavor in itertools.product(SHAPES.items(), (MHSA, FWSA)):
        peak[(name, flavor, "LWT")] = memory_timeline(plan_lwt(d, cfg, flavor)).peak / 1000
        peak[(name, flavor, "DFT")] = memory_timeline(plan_dft(d, cfg, flavor)).peak / 1000
    dev = {k: peak[k] / v - 1 for k, v in published.PEAK_KB.items()}
    lwt_ok = abs(dev[("eeg", MHSA, "LWT")]) <= 0.01 and abs(dev[("ecg", MHSA, "LWT")]) <= 0.01
    factor = peak[("ecg", MHSA, "LWT")] / peak[("ecg", MHSA, "DFT")]
    eeg_red = 1 - peak[("eeg", MHSA, "DFT")] / peak[("eeg", MHSA, "LWT")]
    loose = [k for k in dev if k[0] == "tr" or k[1] == FWSA]
    loose_ok = all(abs(dev[k]) <= 0.25 for k in loose)
    flagged = sorted(f"{'/'.join(k)}{100 * dev[k]:+.1f}%" for k in dev if abs(dev[k]) > published.FLAG_TOLERANCE)
    ok = lwt_ok and factor >= 5 and 0.15 <= eeg_red <= 0.35 and loose_ok
    record(7, ok, f"EEG LWT {peak[('eeg', MHSA, 'LWT')]:.1f} KB, ECG LWT {peak[('ecg', MHSA, 'LWT')]:.1f} KB, "
                  f"ECG DFT factor {factor:.2f}x, EEG DFT reduction {100 * eeg_red:.1f}%, flagged {flagged}")


def test_c08_mem_dft_matches_liveness_simulation():
    bad = 0
    for S, P in itertools.product(range(1, 65), range(1, 65)):
        d = AttnDims(S, 1, P, 1)
        for x in range(1, S + 1):
            bad += fused_tile_l1_peak(x, S, P) != mem_dft(x, d)
    record(8, bad == 0, f"{bad} mismatches over x in 1..S, S,P in 1..64")


def test_c09_parallel_determinism():
    bad = []
    for (name, d), flavor in itertools.product(SHAPES.items(), (MHSA, FWSA)):
        block, X = make(d, flavor, seed=5)
        ref, _ = run_untiled(block, X)
        for w in (1, 2, 3, 4, 8):
            out, _ = run_parallel(block, X, w, threads=(w == 4))
            if out != ref:
                bad.append((name, flavor, w))
    slices = [b - a for a, b in (chunk_bounds(8, 3, i) for i in range(3))]
    block, X = make(ECG)
    _, st = run_parallel(block, X, 3)
    ok = not bad and slices == [3, 3, 2] and st.worker_slices["gemm2"] == [3, 3, 2]
    record(9, ok, f"mismatches {bad}, H=8 over 3 workers -> {slices}")


def test_c10_softmax_row_sums():
    rng = np.random.default_rng(11)
    worst = 0
    rows = 0
    for _ in range(2000):
        S = int(rng.integers(1, 129))
        spread = int(rng.choice([2, 16, 128]))
        x = rng.integers(-spread, spread, size=(4, S)).clip(-128, 127).astype(np.int8)
        A = K.int_softmax(x, int(rng.integers(0, 8)))
        slack = np.abs(A.astype(np.int64).sum(-1) - 128) - S
        worst = max(worst, int(slack.max()))
        rows += 4
    record(10, worst <= 0, f"{rows} rows, max(|sum - 128| - S) = {worst}")


def test_c11_desk_scale_substitutes():
    """Silicon latency, energy, MACs/cycle, task accuracy and measured speed-ups
    are not reproducible without the hardware and trained networks; only the
    direction of the analytical cost model is checked."""
    cfg = MemConfig()
    tp = [cost_estimate(plan_lwt(AttnDims(64, ep, ep, 8), cfg)).throughput for ep in (8, 16, 32, 64)]
    share = [cost_estimate(plan_lwt(AttnDims(S, 32, 32, 8), cfg)).softmax_share for S in (8, 16, 32, 64, 128)]
    ok = all(a < b for a, b in zip(tp, tp[1:])) and all(a < b for a, b in zip(share, share[1:]))
    record(11, ok, "not reproducible at desk scale (latency, energy, MACs/cycle, accuracy, speed-up); "
                   f"throughput rises with E=P {[round(t, 2) for t in tp]}, "
                   f"softmax share rises with S {[round(s, 3) for s in share]}")
