"""Command-line front end: verify | plan | fuse | bench.

Exit codes: 0 pass, 1 verification failure, 2 input error.
"""

from __future__ import annotations

import argparse
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import published
from .block import FWSA, MHSA, quantize_block, random_input, reference_forward
from .container import (ContainerError, ModelContainer, PlatformConfig, emit_container, load_container,
                        parse_bool, parse_platform)
from .executor import CapacityError, cost_estimate, run_parallel, run_tiled, run_untiled
from .fwsa import cost_report, op_threshold
from .oracle import float_mhsa
from .planner import (DFT, LWT, DFTFallback, MemConfig, UntileableError, format_plan, memory_timeline,
                      plan_auto, plan_dft, plan_lwt)
from .tensor import ShapeError

BUNDLED = ("eeg", "ecg", "tr")
VERIFY_L1 = (1_000, 8_000, 64_000, 128_000)
VERIFY_WORKERS = (1, 2, 3, 4, 8)


class InputError(Exception):
    """Bad user input (exit code 2)."""


# --------------------------------------------------------------------------
# loading
# --------------------------------------------------------------------------

def bundled_path(name: str) -> Path:
    return Path(str(resources.files("tinyattn") / "data" / f"{name}.tacont"))


def load_model(spec: str) -> ModelContainer:
    """A container path, or the name of a bundled model (eeg, ecg, tr)."""
    path = bundled_path(spec) if spec in BUNDLED else Path(spec)
    try:
        return load_container(path)
    except OSError as exc:
        raise InputError(f"cannot read model {spec!r}: {exc}") from None


def parse_policy(text: str | None) -> dict:
    if not text:
        return {}
    out = {}
    for item in text.split(","):
        if "=" not in item:
            raise InputError(f"--policy: expected key=BOOL, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        if k not in ("weights_resident", "residual_live", "count_biases"):
            raise InputError(f"--policy: unknown policy {k!r}")
        try:
            out[k] = str(parse_bool(k, v))
        except ValueError as exc:
            raise InputError(f"--policy: {exc}") from None
    return out


def load_platform(path: str | None, policy: str | None = None, l1: int | None = None) -> PlatformConfig:
    text = ""
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read platform {path!r}: {exc}") from None
    overrides = parse_policy(policy)
    if l1 is not None:
        overrides["l1_bytes"] = str(l1)
    return parse_platform(text, overrides)


def model_input(model: ModelContainer, seed: int):
    return model.block.quantize_input(random_input(model.dims, seed))


def kb(n: int) -> str:
    return f"{n / 1000:.1f}"


# --------------------------------------------------------------------------
# commands; each returns (report dict, text lines, exit code)
# --------------------------------------------------------------------------

def cmd_verify(model: ModelContainer, platform: PlatformConfig, seed: int = 0, workers: int = 1):
    block = model.block
    X = model_input(model, seed)
    rep = {"model": model.name or "custom", "dims": str(model.dims), "flavor": block.flavor, "seed": seed}
    checks = {}
    try:
        ref, ustats = run_untiled(block, X, platform.mem())
    except CapacityError as exc:
        rep["error"] = str(exc)
        checks["untiled"] = "fail"
        ref = None
    if ref is not None:
        checks["untiled_vs_oracle"] = "pass" if ref == reference_forward(block, X) else "fail"
        l1_sizes = sorted(set(VERIFY_L1) | {platform.l1_bytes})
        for l1 in l1_sizes:
            cfg = MemConfig(l1, max(platform.l2_bytes, l1 + 1), platform.cores, platform.weights_resident,
                            platform.residual_live, platform.count_biases)
            for mode, make in ((LWT, plan_lwt), (DFT, plan_dft)):
                key = f"{mode.lower()}_l1_{l1}"
                try:
                    plan = make(model.dims, cfg, block.flavor)
                except (UntileableError, DFTFallback):
                    checks[key] = "n/a"
                    continue
                out, st = run_tiled(plan, block, X)
                ok = (out == ref and st.peak_l2 == memory_timeline(plan).peak and st.peak_l1 <= l1
                      and st.total_macs == ustats.total_macs)
                if mode == DFT:
                    ok = ok and "A" not in st.l2_by_buffer
                checks[key] = "pass" if ok else "fail"
        for w in sorted(set(VERIFY_WORKERS) | {workers}):
            out, pst = run_parallel(block, X, w)
            checks[f"parallel_{w}"] = "pass" if out == ref else "fail"
            if w == workers:
                for k, sizes in sorted(pst.worker_slices.items()):
                    rep[f"slices.{k}"] = ",".join(map(str, sizes))
        rep["macs_total"] = ustats.total_macs
        if model.float_weights is not None:
            fw = model.float_weights
            yf = float_mhsa(random_input(model.dims, seed), fw.Wq, fw.Wk, fw.Wv, fw.Wo, biases=fw.biases())
            err = np.abs(ref.dequantize() - yf)
            rep["float_max_abs_err"] = f"{err.max():.4f}"
            rep["float_mean_abs_err"] = f"{err.mean():.4f}"
    for k, v in checks.items():
        rep[f"check.{k}"] = v
    failed = [k for k, v in checks.items() if v == "fail"]
    rep["result"] = "fail" if failed else "pass"
    lines = [f"{k}: {v}" for k, v in checks.items()]
    lines.append(f"result: {rep['result']}" + (f" ({', '.join(failed)})" if failed else ""))
    return rep, lines, 1 if failed else 0


def _peak_row(name, flavor, mode, peak):
    """Report fields comparing a computed peak to the published cell."""
    ref = published.PEAK_KB.get((name, flavor, mode)) if name else None
    if ref is None:
        return {}, ""
    dev = peak / 1000 / ref - 1
    flag = abs(dev) > published.FLAG_TOLERANCE
    fields = {"published_kb": ref, "deviation_pct": f"{100 * dev:+.1f}", "flagged": str(flag).lower()}
    note = f" (published {ref} KB, {100 * dev:+.1f}%{', flagged' if flag else ''})"
    return fields, note


def cmd_plan(model: ModelContainer, platform: PlatformConfig, mode: str = "auto"):
    dims, flavor = model.dims, model.flavor
    cfg = platform.mem()
    name = published.shape_name(dims)
    rep = {"model": model.name or "custom", "dims": str(dims), "flavor": flavor, "mode_requested": mode}
    lines = []
    lwt = plan_lwt(dims, cfg, flavor)
    lwt_peak = memory_timeline(lwt).peak
    try:
        dft = plan_dft(dims, cfg, flavor)
        dft_peak = memory_timeline(dft).peak
    except DFTFallback as exc:
        dft, dft_peak, dft_err = None, None, str(exc)
    if mode == "lwt":
        plan, why = lwt, "requested"
    elif mode == "dft":
        if dft is None:
            raise InputError(f"DFT not applicable: {dft_err}")
        plan, why = dft, "requested"
    elif mode == "auto":
        plan, why = plan_auto(dims, cfg, flavor)
    else:
        raise InputError(f"unknown mode {mode!r}")
    tl = memory_timeline(plan)
    lines.append(format_plan(plan, tl))
    rep.update({"mode": plan.mode, "rationale": why, "peak_l2_bytes": tl.peak, "peak_l2_kb": kb(tl.peak),
                "peak_step": tl.peak_step.kernel if tl.peak_step else "none"})
    if plan.dft_x:
        rep["dft_x"] = plan.dft_x
    for i, (step, m) in enumerate(zip(plan.steps, tl.steps)):
        rep[f"timeline.{i}.{step.kernel}"] = m.peak
    fields, note = _peak_row(name, flavor, plan.mode, tl.peak)
    rep.update({f"peak_{k}": v for k, v in fields.items()})
    lines.append(f"{plan.mode} peak: {tl.peak} B = {kb(tl.peak)} KB{note}")
    rep["lwt_peak_bytes"] = lwt_peak
    if dft is not None:
        factor = lwt_peak / dft_peak
        rep["dft_peak_bytes"] = dft_peak
        rep["dft_reduction_factor"] = f"{factor:.2f}"
        rep["dft_reduction_pct"] = f"{100 * (1 - dft_peak / lwt_peak):.1f}"
        lines.append(f"LWT {kb(lwt_peak)} KB vs DFT {kb(dft_peak)} KB: {factor:.2f}x "
                     f"({100 * (1 - dft_peak / lwt_peak):.1f}% lower)")
    else:
        rep["dft_peak_bytes"] = "n/a"
    lines.append(f"chosen: {plan.mode} ({why})")
    return rep, lines, 0


def fuse_model(model: ModelContainer, seed: int = 0) -> ModelContainer:
    fw = model.float_weights
    if fw is None:
        raise InputError("fuse needs the float weight section (Wq, Wk)")
    block = quantize_block(fw, random_input(model.dims, seed), FWSA)
    return ModelContainer(block, model.ffn_width, fw, (model.name + "-fwsa") if model.name else "")


def cmd_fuse(model: ModelContainer, seed: int = 0):
    fused = fuse_model(model, seed)
    r = cost_report(model.dims)
    d = model.dims
    rep = {"model": model.name or "custom", "dims": str(d), "macs_mhsa": r.macs_mhsa, "macs_fwsa": r.macs_fwsa,
           "mac_change_pct": f"{100 * r.mac_change:+.2f}", "params_mhsa": r.params_mhsa,
           "params_fwsa": r.params_fwsa, "param_change_pct": f"{100 * r.param_change:+.2f}",
           "op_beneficial": str(r.op_beneficial).lower(), "param_beneficial": str(r.param_beneficial).lower(),
           "op_threshold_E": f"{op_threshold(d.S, d.P):.2f}", "param_threshold_E": 2 * d.P}
    lines = [f"block MACs: MHSA {r.macs_mhsa}, FWSA {r.macs_fwsa} ({100 * r.mac_change:+.2f}%)",
             f"parameters: MHSA {r.params_mhsa}, FWSA {r.params_fwsa} ({100 * r.param_change:+.2f}%)",
             f"FWSA has fewer MACs: {r.op_beneficial} (E={d.E} vs threshold {op_threshold(d.S, d.P):.2f}); "
             f"fewer parameters: {r.param_beneficial} (E={d.E} vs {2 * d.P})"]
    name = published.shape_name(d)
    if name:
        ref = published.MAC_CHANGE[name]
        dev = r.mac_change - ref
        rep["published_mac_change_pct"] = f"{100 * ref:+.1f}"
        if abs(dev) > 0.003:
            rep["discrepancy"] = (f"published {100 * ref:+.0f}% is not reproduced by the MAC count formulas "
                                  f"for S={d.S},E={d.E},P={d.P},H={d.H}; computed {100 * r.mac_change:+.2f}%")
            lines.append("note: " + rep["discrepancy"])
    return fused, rep, lines, 0


def bench_row(model: ModelContainer, platform: PlatformConfig, seeds, workers: int = 1):
    """{(flavor, mode): metrics} for MHSA/FWSA x LWT/DFT."""
    cfg = platform.mem()
    blocks = {}
    if model.float_weights is not None:
        X0 = random_input(model.dims, seeds[0])
        for fl in (MHSA, FWSA):
            blocks[fl] = model.block if fl == model.flavor else quantize_block(model.float_weights, X0, fl)
    else:
        blocks[model.flavor] = model.block
    rows = {}
    for fl in (MHSA, FWSA):
        for mode, make in ((LWT, plan_lwt), (DFT, plan_dft)):
            if fl not in blocks:
                rows[(fl, mode)] = None
                continue
            try:
                plan = make(model.dims, cfg, fl)
            except (UntileableError, DFTFallback):
                rows[(fl, mode)] = None
                continue
            b = blocks[fl]
            exact = True
            for s in seeds:
                X = b.quantize_input(random_input(model.dims, s))
                ref, _ = run_untiled(b, X, cfg)
                out, st = run_tiled(plan, b, X)
                exact &= out == ref
                pout, pst = run_parallel(b, X, workers)
                exact &= pout == ref
            est = cost_estimate(plan, simd_width=platform.simd_width)
            rows[(fl, mode)] = {"peak_l2_bytes": st.peak_l2, "peak_l1_bytes": st.peak_l1,
                                "macs": st.total_macs, "l2_to_l1_bytes": st.l2_to_l1,
                                "l1_to_l2_bytes": st.l1_to_l2, "est_cycles": int(round(est.total)),
                                "est_softmax_share": f"{est.softmax_share:.3f}",
                                "exact": str(bool(exact)).lower(),
                                "slices": ";".join(f"{k}:{','.join(map(str, v))}"
                                                   for k, v in sorted(pst.worker_slices.items()))}
    return rows


def cmd_bench(models: list, platform: PlatformConfig, seed: int = 0, workers: int = 1, n_seeds: int = 2):
    seeds = [seed + i for i in range(n_seeds)]
    rep = {"seeds": ",".join(map(str, seeds)), "workers": workers}
    configs = [(MHSA, LWT), (MHSA, DFT), (FWSA, LWT), (FWSA, DFT)]
    header = f"{'model':<8}" + "".join(f"{f + '/' + m:>14}" for f, m in configs) + "   (L2 peak KB)"
    lines = [header]
    failed = False
    for model in models:
        tag = model.name or published.shape_name(model.dims) or "custom"
        rows = bench_row(model, platform, seeds, workers)
        cells = []
        for f, m in configs:
            r = rows[(f, m)]
            if r is None:
                cells.append(f"{'n/a':>14}")
                rep[f"bench.{tag}.{f}.{m}"] = "n/a"
                continue
            failed |= r["exact"] != "true"
            for k, v in r.items():
                rep[f"bench.{tag}.{f}.{m}.{k}"] = v
            cells.append(f"{kb(r['peak_l2_bytes']):>14}")
        lines.append(f"{tag:<8}" + "".join(cells))
    rep["result"] = "fail" if failed else "pass"
    return rep, lines, 1 if failed else 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def format_report(rep: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in rep.items())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tinyattn", description="int8 attention planning and verification")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model_required=True):
        sp.add_argument("--model", action="append" if not model_required else "store", required=model_required,
                        help="container path or bundled name (eeg, ecg, tr)")
        sp.add_argument("--platform", help="platform config (key = value lines)")
        sp.add_argument("--policy", help="weights_resident=BOOL,residual_live=BOOL")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--report", help="write the key=value report here")

    common(sub.add_parser("verify", help="oracle / tiled / parallel equivalence suite"))
    sp = sub.add_parser("plan", help="tiling schedule and L2 timeline")
    common(sp)
    sp.add_argument("--mode", choices=("lwt", "dft", "auto"), default="auto")
    sp = sub.add_parser("fuse", help="fold Wq, Wk into W* and report the cost change")
    common(sp)
    sp.add_argument("--out", help="write the fused container here")
    common(sub.add_parser("bench", help="MHSA/FWSA x LWT/DFT comparison table"), model_required=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.workers < 1:
            raise InputError("--workers must be >= 1")
        platform = load_platform(args.platform, args.policy)
        if args.command == "bench":
            models = [load_model(m) for m in (args.model or BUNDLED)]
            rep, lines, code = cmd_bench(models, platform, args.seed, args.workers)
        else:
            model = load_model(args.model)
            if args.command == "verify":
                rep, lines, code = cmd_verify(model, platform, args.seed, args.workers)
            elif args.command == "plan":
                rep, lines, code = cmd_plan(model, platform, args.mode)
            else:
                fused, rep, lines, code = cmd_fuse(model, args.seed)
                if args.out:
                    Path(args.out).write_text(emit_container(fused), encoding="utf-8")
                    rep["fused_container"] = args.out
    except (InputError, ContainerError, UntileableError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print("\n".join(lines))
    if args.report:
        Path(args.report).write_text(format_report(rep), encoding="utf-8")
    else:
        print(format_report(rep), end="")
    return code


if __name__ == "__main__":
    sys.exit(main())
