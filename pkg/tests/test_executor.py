import numpy as np
import pytest

from tinyattn.block import FWSA, MHSA, FloatWeights, quantize_block, random_float_weights, random_input
from tinyattn.executor import (CapacityError, SimMemory, WorkingSetViolation, chunk_bounds, cost_estimate,
                               run_parallel, run_tiled, run_untiled)
from tinyattn.fwsa import count_block_ops
from tinyattn.planner import MemConfig, TilingPlan, buffer_sizes, memory_timeline, plan_dft, plan_lwt
from tinyattn.tensor import ECG, EEG, TR, AttnDims


def make(dims, flavor=MHSA, seed=0):
    block = quantize_block(random_float_weights(dims, seed), random_input(dims, seed), flavor)
    return block, block.quantize_input(random_input(dims, seed + 100))


def test_untiled_tr_shape_and_macs():
    block, X = make(TR)
    out, st = run_untiled(block, X)
    assert out.shape == (5, 32)
    assert st.total_macs == count_block_ops(TR)[0]
    block, X = make(TR, FWSA)
    assert run_untiled(block, X)[1].total_macs == count_block_ops(TR)[1]


def test_identity_block_passes_input_through():
    eye = np.eye(4).reshape(1, 4, 4)
    fw = FloatWeights(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), eye, np.eye(4))
    # identical rows make every attention map reduce to the identity on V
    Xf = np.tile(np.array([[0.5, -0.25, 0.75, 0.125]]), (4, 1))
    block = quantize_block(fw, Xf)
    X = block.quantize_input(Xf)
    out, _ = run_untiled(block, X)
    assert np.abs(out.dequantize() - Xf).max() <= 2 ** -block.exps["out"] * 2


def test_untiled_capacity_error():
    block, X = make(TR)
    with pytest.raises(CapacityError):
        run_untiled(block, X, MemConfig(l1_bytes=8, l2_bytes=16))


@pytest.mark.parametrize("dims", [EEG, ECG, TR], ids=["eeg", "ecg", "tr"])
@pytest.mark.parametrize("flavor", [MHSA, FWSA])
def test_tiled_equals_untiled(dims, flavor):
    block, X = make(dims, flavor)
    ref, ust = run_untiled(block, X)
    for l1 in (8_000, 128_000):
        cfg = MemConfig(l1_bytes=l1)
        for plan in (plan_lwt(dims, cfg, flavor), plan_dft(dims, cfg, flavor)):
            out, st = run_tiled(plan, block, X)
            assert out == ref
            assert st.peak_l2 == memory_timeline(plan).peak
            assert st.peak_l1 <= max(s.l1_bytes for s in plan.steps) <= l1
            assert st.macs == ust.macs
            if plan.mode == "DFT":
                assert "A" not in st.l2_by_buffer


def test_dft_single_row_tiles():
    block, X = make(ECG)
    ref, _ = run_untiled(block, X)
    cfg = MemConfig(l1_bytes=334 + 1)   # mem_dft(1) for ECG is 334 B
    plan = plan_dft(ECG, cfg)
    assert plan.dft_x == 1
    out, st = run_tiled(plan, block, X)
    assert out == ref
    assert st.peak_l1 <= 335


def test_working_set_violation_names_step():
    block, X = make(TR)
    plan = plan_lwt(TR, MemConfig(l1_bytes=128_000))
    shrunk = TilingPlan(plan.mode, plan.flavor, plan.dims, MemConfig(l1_bytes=2_000), plan.steps, plan.sizes)
    with pytest.raises(WorkingSetViolation) as exc:
        run_tiled(shrunk, block, X)
    assert exc.value.step == 0


def test_weight_streaming_policy():
    block, X = make(EEG)
    ref, _ = run_untiled(block, X)
    cfg = MemConfig(weights_resident=False, residual_live=False)
    plan = plan_lwt(EEG, cfg)
    out, st = run_tiled(plan, block, X)
    assert out == ref and st.peak_l2 == memory_timeline(plan).peak


def test_chunking_rule():
    assert [chunk_bounds(8, 3, w) for w in range(3)] == [(0, 3), (3, 6), (6, 8)]
    assert [chunk_bounds(8, 8, w) for w in range(8)] == [(w, w + 1) for w in range(8)]
    assert [chunk_bounds(2, 4, w) for w in range(4)] == [(0, 1), (1, 2), (2, 2), (2, 2)]
    with pytest.raises(ValueError):
        chunk_bounds(8, 0, 0)


@pytest.mark.parametrize("flavor", [MHSA, FWSA])
def test_parallel_equals_sequential(flavor):
    block, X = make(ECG, flavor)
    ref, _ = run_untiled(block, X)
    for w in (1, 2, 3, 4, 8):
        out, st = run_parallel(block, X, w, threads=(w == 4))
        assert out == ref
    _, st = run_parallel(block, X, 3)
    assert st.worker_slices["gemm2"] == [3, 3, 2]
    assert st.worker_slices["linear_out"] == [22, 22, 22]


def test_sim_memory():
    m = SimMemory("L2", 10)
    m.alloc("a", 6)
    m.release("a", 2)
    m.alloc("b", 6)
    assert m.peak == 10
    with pytest.raises(CapacityError):
        m.alloc("c", 1)
    with pytest.raises(RuntimeError):
        m.release("a", 100)


def test_cost_model_trends():
    cfg = MemConfig()
    tp = []
    for ep in (8, 16, 32, 64):
        d = AttnDims(64, ep, ep, 8)
        tp.append(cost_estimate(plan_lwt(d, cfg)).throughput)
    assert all(a < b for a, b in zip(tp, tp[1:]))
    share = [cost_estimate(plan_lwt(AttnDims(S, 32, 32, 8), cfg)).softmax_share for S in (8, 16, 32, 64, 128)]
    assert all(a < b for a, b in zip(share, share[1:]))
    empty = TilingPlan("LWT", MHSA, TR, cfg, (), buffer_sizes(TR, MHSA, cfg))
    assert cost_estimate(empty).total == 0
