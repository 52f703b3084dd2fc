"""Layer-wise versus depth-first tiling and the resulting L2 peaks.

Run: python3 demos/03_memory_plans.py
"""
from tinyattn.planner import MemConfig, format_plan, mem_dft, memory_timeline, plan_auto, plan_dft, plan_lwt
from tinyattn.tensor import ECG, REFERENCE_SHAPES

cfg = MemConfig()   # 128 KB L1, 1.5 MB L2, weights resident, input kept for the residual

# The layer-wise plan materializes the whole attention map in L2.
lwt = plan_lwt(ECG, cfg)
print(format_plan(lwt))
print()

# Depth-first tiling runs GEMM1, softmax and GEMM2 on x query rows at a time,
# so the map only ever exists as an x-row tile in L1.
dft = plan_dft(ECG, cfg)
print(format_plan(dft))
print(f"tile rows x={dft.dft_x}, L1 tile bytes {mem_dft(dft.dft_x, ECG)}")
print()

for name, d in REFERENCE_SHAPES.items():
    a = memory_timeline(plan_lwt(d, cfg)).peak
    b = memory_timeline(plan_dft(d, cfg)).peak
    plan, why = plan_auto(d, cfg)
    print(f"{name:<4} LWT {a / 1000:6.1f} KB  DFT {b / 1000:6.1f} KB  ({a / b:4.2f}x)  auto: {why}")

# Short sequences with wide heads (TR: S=5, P=32) are the case where keeping
# Q, K and V resident costs more than the attention map itself.
