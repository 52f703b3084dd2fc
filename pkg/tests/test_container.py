import pytest

from tinyattn.block import FWSA, MHSA, random_input, reference_forward
from tinyattn.container import (ContainerError, build_container, emit_container, parse_container, parse_platform)
from tinyattn.tensor import AttnDims

D = AttnDims(6, 8, 4, 2)


@pytest.mark.parametrize("flavor", [MHSA, FWSA])
@pytest.mark.parametrize("with_float", [True, False])
def test_round_trip(flavor, with_float):
    m = build_container(D, flavor, seed=3, ffn_width=32, name="toy", with_float=with_float)
    text = emit_container(m)
    back = parse_container(text)
    assert emit_container(back) == text
    assert back.dims == D and back.flavor == flavor and back.ffn_width == 32 and back.name == "toy"
    X = m.block.quantize_input(random_input(D, 9))
    assert reference_forward(back.block, X) == reference_forward(m.block, X)


def _lines(flavor=MHSA):
    return emit_container(build_container(D, flavor, seed=1, with_float=False)).splitlines()


def test_truncated_blob_names_field():
    lines = _lines()
    i = next(k for k, l in enumerate(lines) if l.startswith("tensor name=Wk"))
    lines[i + 1] = lines[i + 1][:8]
    with pytest.raises(ContainerError) as exc:
        parse_container("\n".join(lines))
    assert "Wk" in str(exc.value) and f"line {i + 2}" in str(exc.value)


def test_fwsa_without_wstar_rejected():
    lines = _lines(FWSA)
    i = next(k for k, l in enumerate(lines) if l.startswith("tensor name=W_star"))
    del lines[i:i + 2]
    with pytest.raises(ContainerError) as exc:
        parse_container("\n".join(lines))
    assert "W_star" in str(exc.value)


@pytest.mark.parametrize("edit,field", [
    (lambda ls: ls[1:], "header"),
    (lambda ls: [l for l in ls if l != "end"], "end"),
    (lambda ls: [l.replace("flavor MHSA", "flavor GQA") for l in ls], "flavor"),
    (lambda ls: [l.replace("dims S=6", "dims S=0") for l in ls], "dims"),
    (lambda ls: [l for l in ls if not l.startswith("requant name=m1")], "m1"),
    (lambda ls: ls[:2] + ["bogus x=1"] + ls[2:], "bogus"),
])
def test_diagnostics(edit, field):
    with pytest.raises(ContainerError) as exc:
        parse_container("\n".join(edit(_lines())))
    assert field in str(exc.value)


def test_platform_parsing():
    p = parse_platform("l1_bytes = 64000  # cluster L1\ncores = 4\nweights_resident = false\n")
    assert (p.l1_bytes, p.cores, p.weights_resident, p.l2_bytes) == (64_000, 4, False, 1_500_000)
    assert parse_platform("", {"residual_live": "no"}).residual_live is False
    for bad in ("l1_bytes = 0", "l3_bytes = 5", "cores = many", "l1_bytes 5", "l1_bytes = 2000000"):
        with pytest.raises(ContainerError):
            parse_platform(bad)
