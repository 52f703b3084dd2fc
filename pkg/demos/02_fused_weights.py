"""Folding Wq and Wk into a single W* = Wq Wk^T per head.

In float arithmetic the fused form gives the same attention. Whether it is
cheaper depends on the block shape.

Run: python3 demos/02_fused_weights.py
"""
import numpy as np

from tinyattn.fwsa import cost_report, fuse_weights, op_threshold
from tinyattn.oracle import float_fwsa, float_mhsa
from tinyattn.tensor import REFERENCE_SHAPES, AttnDims

rng = np.random.default_rng(1)
S, E, P, H = 12, 16, 8, 4
X = rng.normal(size=(S, E))
Wq, Wk, Wv = (rng.normal(size=(H, E, P)) / np.sqrt(E) for _ in range(3))
Wo = rng.normal(size=(H * P, E)) / np.sqrt(H * P)

diff = np.abs(float_mhsa(X, Wq, Wk, Wv, Wo) - float_fwsa(X, fuse_weights(Wq, Wk), Wv, Wo)).max()
print(f"max |MHSA - FWSA| = {diff:.1e}")

print()
print(f"{'shape':<6}{'S':>4}{'E':>4}{'P':>4}{'MAC change':>12}{'params':>9}  fewer MACs?")
for name, d in REFERENCE_SHAPES.items():
    r = cost_report(d)
    print(f"{name:<6}{d.S:>4}{d.E:>4}{d.P:>4}{100 * r.mac_change:>+11.1f}%{100 * r.param_change:>+8.1f}%  "
          f"{r.op_beneficial}")

# With S = P = 32 the fused form stops saving MACs once E passes ~51.8,
# and stops saving parameters at E = 2P = 64.
print()
print("MAC threshold for S=P=32:", round(op_threshold(32, 32), 2))
for E in (48, 52, 60, 64, 72):
    r = cost_report(AttnDims(32, E, 32, 8))
    print(f"  E={E:<3} MACs {100 * r.mac_change:+6.1f}%  params {100 * r.param_change:+6.1f}%")
