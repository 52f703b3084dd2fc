from tinyattn.cli import main
from tinyattn.container import load_container


def report(path):
    return dict(line.rstrip("\n").split("=", 1) for line in path.read_text().splitlines())


def test_verify_ecg(tmp_path, capsys):
    out = tmp_path / "r.txt"
    assert main(["verify", "--model", "ecg", "--workers", "3", "--report", str(out)]) == 0
    rep = report(out)
    checks = {k: v for k, v in rep.items() if k.startswith("check.")}
    assert checks and all(v in ("pass", "n/a") for v in checks.values())
    assert rep["check.untiled_vs_oracle"] == "pass"
    assert rep["slices.gemm2"] == "3,3,2"


def test_plan_eeg_lwt(tmp_path, capsys):
    out = tmp_path / "r.txt"
    assert main(["plan", "--model", "eeg", "--mode", "lwt", "--report", str(out)]) == 0
    text = capsys.readouterr().out
    assert "129.3" in text
    rep = report(out)
    assert rep["mode"] == "LWT"


def test_bad_platform_exit_2(tmp_path, capsys):
    plat = tmp_path / "p.cfg"
    plat.write_text("l1_bytes = 0\n")
    assert main(["plan", "--model", "tr", "--platform", str(plat)]) == 2
    assert capsys.readouterr().err.startswith("error:")
    assert main(["verify", "--model", "nope.tacont"]) == 2
    assert main(["plan", "--model", "tr", "--policy", "weights_resident=maybe"]) == 2
    assert main(["verify", "--model", "tr", "--workers", "0"]) == 2


def test_fuse_tr(tmp_path, capsys):
    out, fused = tmp_path / "r.txt", tmp_path / "tr-fwsa.tacont"
    assert main(["fuse", "--model", "tr", "--out", str(fused), "--report", str(out)]) == 0
    rep = report(out)
    assert rep["mac_change_pct"] == "-23.19"
    assert rep["param_change_pct"] == "-25.00"
    assert rep["op_beneficial"] == "true" and "discrepancy" not in rep
    assert load_container(fused).flavor == "FWSA"


def test_fuse_ecg_flags_discrepancy(tmp_path, capsys):
    out = tmp_path / "r.txt"
    assert main(["fuse", "--model", "ecg", "--report", str(out)]) == 0
    rep = report(out)
    assert rep["op_beneficial"] == "false" and "discrepancy" in rep


def test_bench_deterministic_and_worker_independent(tmp_path, capsys):
    paths = [tmp_path / f"{i}.txt" for i in range(3)]
    for p, w in zip(paths, (1, 1, 8)):
        assert main(["bench", "--model", "tr", "--workers", str(w), "--report", str(p)]) == 0
    a, b, c = (report(p) for p in paths)
    assert a == b and a["result"] == "pass"
    strip = lambda r: {k: v for k, v in r.items() if not k.endswith(".slices") and k != "workers"}
    assert strip(a) == strip(c)
