"""Optimized int8 attention kernels against the naive integer reference.

Run: python3 demos/01_kernels_vs_oracle.py
"""
import numpy as np

from tinyattn import kernels as K
from tinyattn import oracle
from tinyattn.tensor import Layout, QuantTensor, RequantParams

rng = np.random.default_rng(0)

# A small projection with awkward sizes, so the 4x2 unrolled windows
# leave remainders in both directions.
S, E, P, H = 7, 10, 5, 3
X = rng.integers(-128, 128, size=(S, E)).astype(np.int8)
W = rng.integers(-128, 128, size=(H, P, E)).astype(np.int8)
rp = RequantParams(1, 9, rng.integers(-500, 500, size=H * P).astype(np.int16))
w = K.LinearWeights(QuantTensor(W, Layout.HPE, 6), rp)

Q = K.linear_irl(QuantTensor(X, Layout.SE, 5), w, 2)
V = K.linear_wrl(QuantTensor(X, Layout.SE, 5), w, 2)
print("IRL output layout", Q.layout.name, Q.shape)
print("WRL output layout", V.layout.name, V.shape)

ref = oracle.naive_int_kernel("irl", {"X": X, "W": W}, rp)
print("IRL matches naive reference:", np.array_equal(Q.data, ref))
# WRL is the same projection, stored transposed per head
print("WRL is IRL transposed:", np.array_equal(V.data, Q.data.transpose(0, 2, 1)))

# Fused GEMM + softmax. Each row of the attention map sums to about 128,
# the int8 code for 1.0 at scale 2^-7.
A = K.matmul_softmax(Q, Q, RequantParams(1, 4), 3)
sums = A.data.astype(int).sum(-1)
print("attention map", A.layout.name, A.shape, "row sums in", sums.min(), "..", sums.max())

# the integer softmax on its own
row = np.array([[0, 0, 0, 0], [40, 0, -20, -128]], dtype=np.int8)
print("int_softmax:", K.int_softmax(row, 4).tolist())
