"""Executing tiled plans on the simulated two-level memory.

Tiled runs must give exactly the bytes of the untiled run, and the L2
occupancy observed during execution must match the planned timeline.

Run: python3 demos/04_tiled_execution.py
"""
from tinyattn.block import FWSA, MHSA, quantize_block, random_float_weights, random_input
from tinyattn.executor import cost_estimate, run_parallel, run_tiled, run_untiled
from tinyattn.planner import MemConfig, memory_timeline, plan_dft, plan_lwt
from tinyattn.tensor import EEG

for flavor in (MHSA, FWSA):
    block = quantize_block(random_float_weights(EEG, 0), random_input(EEG, 0), flavor)
    X = block.quantize_input(random_input(EEG, 1))
    ref, st = run_untiled(block, X)
    print(f"{flavor}: untiled, {st.total_macs} MACs, L2 peak {st.peak_l2} B")
    for l1 in (8_000, 64_000):
        cfg = MemConfig(l1_bytes=l1)
        for plan in (plan_lwt(EEG, cfg, flavor), plan_dft(EEG, cfg, flavor)):
            out, st = run_tiled(plan, block, X)
            print(f"  {plan.mode} L1={l1:>6}: exact={out == ref}  L2 peak {st.peak_l2} "
                  f"(planned {memory_timeline(plan).peak})  L1 peak {st.peak_l1}  "
                  f"L2->L1 {st.l2_to_l1} B")

# Heads are split across workers in contiguous chunks of ceil(H / workers).
out, st = run_parallel(block, X, workers=3, threads=True)
print("3 workers, threads: exact =", out == ref, " head slices", st.worker_slices["gemm2"])

est = cost_estimate(plan_lwt(EEG, MemConfig()))
print(f"cost model: {est.total:.0f} cycles, {est.throughput:.2f} MAC/cycle, softmax share {est.softmax_share:.2f}")
