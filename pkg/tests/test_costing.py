import csv
import io
import math

import numpy as np
import pytest

from conftest import tiny_model
from mpcmin.accounting import Counters, NonArithKind
from mpcmin.costing import (
    DEFAULT_NONARITH,
    CostError,
    CostReport,
    CostTable,
    improvement,
    nonarith_share,
)
from mpcmin.model import Model, ModelConfig, prefill
from mpcmin.protocol import ProtocolConfig, record_stage_costs, run_protocol
from mpcmin.tensor import PlainEvaluator
from mpcmin.transforms import Partition, TransformManifest, apply_manifest


def report_for(model, partition=None, n=2, backend="dealer2pc", scenario="run"):
    _, tr = run_protocol(ProtocolConfig(backend, partition, n=n), model, [1, 2, 3, 4])
    return CostReport.from_counters(tr.counters, CostTable(), backend, scenario)


def test_modeled_bytes_formula():
    c = Counters()
    c.add("nonarith.Trunc", 10)
    c.add("calls.Trunc", 2)
    c.add("opened_elements", 5)
    c.add("triple_mults", 7)
    c.add("mult_rounds", 3)
    table = CostTable()
    r = CostReport.from_counters(c, table, "plain2pc")
    pre = r.stages["prefill"]
    assert pre["modeled_bytes"] == 10 * 64 + 5 * 0 + 7 * 256
    assert pre["modeled_rounds"] == 2 * 1 + 3 * 2
    r = CostReport.from_counters(c, table, "rep3pc")
    assert r.stages["prefill"]["modeled_bytes"] == 10 * 64 + 5 * 8


def test_identical_reports_ratio_one():
    r = report_for(tiny_model(1))
    f = improvement(r, r)
    assert all(v == 1.0 for st in f.ratios.values() for v in st.values())
    assert f.infinite == ()


def test_division_by_zero_flagged():
    m = tiny_model(2)
    base = report_for(m, Partition(2, 2))
    var = report_for(m, Partition(0, 2))
    f = improvement(base, var)
    assert math.isinf(f.get("prefill", "triple_mults"))
    assert ("prefill", "triple_mults") in f.infinite
    assert f.to_dict()["ratios"]["prefill"]["triple_mults"] == "inf"


def test_stage_mismatch():
    m = tiny_model(3)
    _, tr = run_protocol(ProtocolConfig(n=2), m, [1, 2])
    pre, dec = record_stage_costs(tr)
    with pytest.raises(CostError):
        improvement(pre, dec)


def test_total_is_sum_of_stages():
    r = report_for(tiny_model(4), n=3)
    pre, dec, tot = r.stages["prefill"], r.stages["decode"], r.total
    assert set(tot) == set(pre)
    assert all(tot[k] == pre[k] + dec[k] for k in tot)


def test_measured_bytes_are_channel_totals():
    m = tiny_model(5)
    _, tr = run_protocol(ProtocolConfig("rep3pc", Partition(1, 2), n=2), m, [1, 2])
    r = CostReport.from_counters(tr.counters, CostTable(), "rep3pc")
    by = tr.bytes_by_stage()
    assert r.stages["prefill"]["measured_bytes"] == by["prefill"]
    assert r.stages["decode"]["measured_bytes"] == by["decode"]


def test_counters_nonnegative():
    with pytest.raises(ValueError):
        Counters().add("triple_mults", -1)


def test_nonarith_share_zero_weights():
    r = report_for(tiny_model(6))
    zero = CostTable(nonarith={k: {"bytes_per_element": 0, "rounds_per_batch": 0} for k in DEFAULT_NONARITH})
    assert nonarith_share(r, zero) == 0.0
    assert 0 < nonarith_share(r) < 1


@pytest.mark.parametrize("backend", ["dealer2pc", "rep3pc"])
def test_nonarith_share_long_prompt(backend):
    cfg = ModelConfig(num_layers=1, heads=2, head_dim=4, ffn_dim=16, vocab=16, max_seq=2048)
    m = Model.random(cfg, 0)
    ev = PlainEvaluator(m.fmt, backend=backend)
    from mpcmin.model import ModelPart, PartRunner

    runner = PartRunner(ev, ModelPart(m, (0,), embedding=True, head=True, private=True))
    with ev.stage("prefill"):
        runner.run(list(np.arange(2048) % 16))
    r = CostReport.from_counters(ev.counters, CostTable(), backend)
    assert nonarith_share(r, stage="prefill") > 0.85


def test_merge_scales_attention_subtotal():
    base = tiny_model(7, heads=4, num_layers=2)
    merged, part, _ = apply_manifest(base, TransformManifest(merge=4))
    rb = report_for(base)
    rm = report_for(merged, part)
    for st in ("prefill", "decode"):
        assert rb.attention_nonarith_bytes(st) == 4 * rm.attention_nonarith_bytes(st)
        for site in ("ffn_act", "linear"):
            assert rb.sites[st][site] == rm.sites[st][site]


def test_lora_ratio_law():
    base = tiny_model(8, heads=4, head_dim=4, ffn_dim=16, num_layers=1)
    hid, r = 16, 2
    lora, part, _ = apply_manifest(base, TransformManifest(lora_rank=r))
    full = report_for(base, n=1)
    split = report_for(lora, part, n=1)
    naive = full.site_sum("prefill", "triple_mults", ("linear",))
    low = split.site_sum("prefill", "triple_mults", ("lora",))
    assert split.site_sum("prefill", "triple_mults", ("linear",)) == 0
    assert naive / low == hid * hid / (r * (hid + hid))


def test_report_roundtrip_and_csv(tmp_path):
    r = report_for(tiny_model(9), scenario="s1")
    again = CostReport.from_dict(r.to_dict())
    assert again.stages == r.stages
    rows = list(csv.reader(io.StringIO(r.to_csv())))
    assert rows[0] == ["scenario", "stage", "metric", "value"]
    assert {row[1] for row in rows[1:]} == {"prefill", "decode", "total"}
    assert all(row[0] == "s1" for row in rows[1:])
    with pytest.raises(CostError):
        CostReport.from_dict({**r.to_dict(), "schema_version": 99})


def test_cost_table_io(tmp_path):
    t = CostTable()
    t.save(tmp_path / "t.json")
    assert CostTable.load(tmp_path / "t.json") == t
    custom = CostTable.from_dict({"nonarith": {"Trunc": {"bytes_per_element": 1, "rounds_per_batch": 1}}})
    assert custom.kind("Trunc")["bytes_per_element"] == 1
    assert custom.kind("Gelu") == t.kind("Gelu")
    with pytest.raises(CostError):
        CostTable.from_dict({"nonarith": {"Trunc": {"bytes_per_element": -1, "rounds_per_batch": 0}}})
    with pytest.raises(ValueError):
        CostTable.from_dict({"nonarith": {"Sqrt": {"bytes_per_element": 1, "rounds_per_batch": 0}}})
    with pytest.raises(CostError):
        t.backend("gpu")
