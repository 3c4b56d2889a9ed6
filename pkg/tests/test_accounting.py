from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from haformer import autodiff as ad
from haformer import tensor_core as tc
from haformer.accounting import (
    HEADER, REFERENCE, CostReport, Row, attention_memory, cost_report, count_flops, count_params, emit_report,
    enumerate_params, et_costs, parse_csv,
)
from haformer.efficient_transformer import EtConfig, emhsa, et_ledger
from haformer.layers import count_params as ledger_params
from haformer.layers import init_params
from haformer.network import VARIANTS, ModelConfig, build, variant
from haformer.tensor_core import ConvSpec

GOLDEN = Path(__file__).parent / "golden"
SMALL = replace(ModelConfig(), height=64, width=64)


def two_rows():
    spec = ConvSpec.same(3, 16, (3, 3))
    fc = ConvSpec.same(16, 16, (1, 1))
    return CostReport(rows=[
        Row("stem", spec.num_params, spec.macs(8, 8), 2 * spec.macs(8, 8), 16 * 64),
        Row("head", fc.num_params, fc.macs(8, 8), 2 * fc.macs(8, 8), 16 * 64),
    ], resolution=(8, 8))


def test_single_conv_closed_forms():
    assert ledger_params({"c": ConvSpec.same(3, 16, (3, 3))}) == 448
    c, h, w = 8, 5, 7
    rep = CostReport([Row("pw", 0, ConvSpec.same(c, c, (1, 1), has_bias=False).macs(h, w), 0, 0)])
    assert 2 * rep.macs == 2 * c * c * h * w


@pytest.mark.parametrize("name", list(VARIANTS))
def test_analytic_equals_enumeration(name):
    m = build(variant(name, SMALL), 0)
    assert count_params(m).params == enumerate_params(m) == m.num_params()


@pytest.mark.parametrize("name", list(VARIANTS))
def test_analytic_macs_match_instrumented_forward(name):
    m = build(variant(name, SMALL), 0)
    with tc.probe() as p:
        m.forward(np.zeros((3, 64, 64), np.float32))
    assert count_flops(m, (64, 64)).macs == p.macs


def test_emhsa_score_macs_independent_of_splits(rng):
    n, dim = 64, 16
    z = rng.standard_normal((n, dim)).astype(tc.DTYPE)
    measured = {}
    for s in (1, 2, 4):
        cfg = EtConfig(dim=dim, attn_dim=dim, heads=2, splits=s, reduction=2)
        with tc.probe() as p:
            emhsa(z, ad.Params(init_params(et_ledger(cfg), rng)), cfg)
        d, nr = cfg.head_dim, n // 2
        proj = 3 * n * dim * dim + cfg.heads * 2 * nr * (2 * d) * d + n * dim * dim
        measured[s] = p.macs - proj
        assert measured[s] == cfg.heads * 2 * n * nr * d
    assert len(set(measured.values())) == 1


def test_et_costs_match_probe(rng):
    from haformer.efficient_transformer import TokenGrid, et_block

    cfg = EtConfig(dim=16, attn_dim=8, heads=2, splits=2, reduction=2)
    with tc.probe() as p:
        et_block(TokenGrid(rng.standard_normal((24, 16)).astype(tc.DTYPE), (4, 6)),
                 ad.Params(init_params(et_ledger(cfg), rng)), cfg)
    assert et_costs(cfg, (4, 6))[0] == p.macs


def test_attention_memory(rng):
    assert attention_memory(EtConfig(splits=1, reduction=1), 50)["sequential"] == 2500
    mem = attention_memory(EtConfig(splits=4, reduction=2), 2048)
    assert mem["sequential"] == 2_097_152 and mem["parallel"] == 4 * 2_097_152
    cfg = EtConfig(dim=16, attn_dim=16, heads=2, splits=4, reduction=2)
    with tc.probe() as p:
        emhsa(rng.standard_normal((64, 16)).astype(tc.DTYPE), ad.Params(init_params(et_ledger(cfg), rng)), cfg)
    assert p.peak_scores == attention_memory(cfg, 64)["sequential"]


def test_totals_and_resolution_scaling():
    rep = cost_report(SMALL)
    assert rep.params == sum(r.params for r in rep.rows)
    assert rep.flops == sum(r.flops for r in rep.rows)
    big = cost_report(SMALL, (128, 128))
    assert big.params == rep.params and big.macs > rep.macs


def test_conv_macs_scale_linearly_with_width():
    cfg = variant("rm-baseline", SMALL)
    a = cost_report(cfg, (64, 64))
    b = cost_report(cfg, (64, 128))
    assert b.macs == 2 * a.macs


def test_ablation_ordering():
    p = {v: cost_report(variant(v)).params for v in VARIANTS}
    assert p["rm-baseline"] < p["hm-baseline"] < p["hape-baseline"] < p["default"]
    assert p["add-fusion"] < p["default"] < p["concat-fusion"]


def test_calibration_band():
    rep = cost_report(ModelConfig(), reference=REFERENCE["default"])
    assert abs(rep.params / 602.298e3 - 1) <= 0.15
    assert abs(rep.flops / 11.051e9 - 1) <= 0.25
    text = emit_report(rep, "table")
    assert "calibration" in text and "s*r = 8" in text and "= r = 2" in text


def test_empty_report_is_header_only():
    assert emit_report(CostReport(), "csv") == ",".join(HEADER) + "\n"


def test_two_row_golden():
    rep = two_rows()
    assert emit_report(rep, "csv") == (GOLDEN / "two_row.csv").read_text()
    assert emit_report(rep, "table") == (GOLDEN / "two_row.txt").read_text()


def test_table_and_csv_agree():
    rep = cost_report(SMALL)
    parsed = parse_csv(emit_report(rep, "csv"))
    table = emit_report(rep, "table").splitlines()
    for line in table:
        if line.startswith("#") or line.startswith("-") or line.startswith("module"):
            continue
        name, params, _, macs, _, peak = line.split()
        assert parsed[name][0] == int(params) and parsed[name][1] == int(macs) and parsed[name][3] == int(peak)
    assert parsed["total"][:3] == (rep.params, rep.macs, rep.flops)


def test_unknown_format():
    with pytest.raises(ValueError):
        emit_report(CostReport(), "json")
