import json

import numpy as np
import pytest

from conftest import tiny_model
from mpcmin.model import ModelError, ideal_functionality
from mpcmin.protocol import ProtocolConfig, record_stage_costs, run_protocol
from mpcmin.sharing import ProtocolAbort
from mpcmin.transforms import Partition, TransformManifest, apply_manifest

BACKENDS = ("dealer2pc", "rep3pc")


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("t", [0, 1, 2])
def test_protocol_matches_functionality(backend, t):
    m = tiny_model(1)
    prompt = [3, 1, 4]
    toks, _ = run_protocol(ProtocolConfig(backend, Partition(t, 2), n=4, seed=2), m, prompt)
    assert toks == ideal_functionality(m, 4, prompt)


def test_all_public_has_no_mpc_traffic():
    m = tiny_model(2)
    toks, tr = run_protocol(ProtocolConfig("dealer2pc", Partition(0, 2), n=3), m, [1, 2])
    assert tr.log == []
    assert tr.counters.snapshot() == {}
    assert toks == ideal_functionality(m, 3, [1, 2])


def test_fully_private_shares_onehot():
    m = tiny_model(3)
    prompt = [5, 6, 7]
    _, tr = run_protocol(ProtocolConfig("rep3pc", Partition(2, 2), n=1), m, prompt)
    embed = tr.counters.snapshot()["prefill"]["embed"]
    vocab, hid = m.config.vocab, m.config.hidden
    # one-hot input rows go in as shares; the table product costs only truncations
    assert embed["nonarith.Trunc"] == len(prompt) * hid
    assert embed.get("triple_mults", 0) == 0
    client_bytes = sum(e.size for e in tr.log if e.sender == "client" and e.stage == "prefill")
    assert client_bytes == 3 * 2 * len(prompt) * vocab * 8


@pytest.mark.parametrize("backend", BACKENDS)
def test_transcript_bytes_match_counters(backend):
    m = tiny_model(4)
    _, tr = run_protocol(ProtocolConfig(backend, Partition(1, 2), n=3), m, [1, 2, 3])
    by_stage = tr.bytes_by_stage()
    for st in ("offline", "prefill", "decode"):
        assert by_stage.get(st, 0) == tr.counters.get("measured_bytes", stage=st)
    lines = tr.to_jsonl().splitlines()
    assert len(lines) == len(tr.log)
    assert json.loads(lines[0])["step"] == 0


def test_single_token_has_empty_decode():
    m = tiny_model(5)
    _, tr = run_protocol(ProtocolConfig("dealer2pc", Partition(2, 2), n=1), m, [1, 2])
    pre, dec = record_stage_costs(tr)
    assert all(v == 0 for v in dec.stages["decode"].values())
    assert pre.stages["prefill"]["triple_mults"] > 0


def test_decode_cost_growth():
    m = tiny_model(6, max_seq=24)
    prompt = [1, 2, 3, 4]
    ns = np.array([2, 4, 8])
    linear_part, total = [], []
    for n in ns:
        _, tr = run_protocol(ProtocolConfig("dealer2pc", Partition(2, 2), n=int(n)), m, prompt)
        total.append(tr.counters.get("triple_mults", stage="decode"))
        linear_part.append(tr.counters.get("triple_mults", stage="decode", sites=("linear", "norm", "head")))
    # weight products are the same every step: exactly linear in n - 1
    per_step = linear_part[0] / (ns[0] - 1)
    assert all(lp == per_step * (n - 1) for lp, n in zip(linear_part, ns))
    # attention adds 2 * hidden products per cached position per private layer
    hid, b = m.config.hidden, len(prompt)
    for tot, lp, n in zip(total, linear_part, ns):
        attn = sum(2 * 2 * hid * (b + j) for j in range(1, n))
        assert tot - lp == attn


@pytest.mark.parametrize("m_merge", [1, 2])
def test_prefill_softmax_count(m_merge):
    base = tiny_model(7, heads=4, num_layers=3)
    model, part, _ = apply_manifest(base, TransformManifest(freeze="2/3", merge=m_merge))
    b = 5
    _, tr = run_protocol(ProtocolConfig("rep3pc", part, n=1), model, list(range(b)))
    assert tr.counters.get("nonarith.SoftmaxExp", stage="prefill") == 2 * (4 // m_merge) * b * b


def test_client_work_scales_with_public_layers():
    m = tiny_model(8, num_layers=4)
    work = []
    for t in (1, 2, 3):
        _, tr = run_protocol(ProtocolConfig("dealer2pc", Partition(t, 4), n=1), m, [1, 2])
        work.append(tr.client_counters.get("public_mults"))
    assert work[0] == 3 * work[2] and work[1] == 2 * work[2]


def test_abort_on_malformed_shares():
    m = tiny_model(9)
    cfg = ProtocolConfig("dealer2pc", Partition(1, 2), n=1, abort_hook=lambda party, msg: party == "P0")
    with pytest.raises(ProtocolAbort):
        run_protocol(cfg, m, [1])


def test_config_errors():
    m = tiny_model(10)
    with pytest.raises(ModelError):
        run_protocol(ProtocolConfig(n=0), m, [1])
    with pytest.raises(ModelError):
        run_protocol(ProtocolConfig(partition=Partition(1, 3)), m, [1])
    with pytest.raises(ModelError):
        run_protocol(ProtocolConfig(), m, [99])
    with pytest.raises(ModelError):
        run_protocol(ProtocolConfig(n=10), m, [1] * 10)
    with pytest.raises(ModelError):
        run_protocol(ProtocolConfig(partition=Partition(1, 2), manifest={"freeze": "2/2"}), m, [1])


def test_deterministic_given_seed():
    m = tiny_model(11)
    a = run_protocol(ProtocolConfig("rep3pc", Partition(1, 2), n=2, seed=5), m, [1, 2])[1]
    b = run_protocol(ProtocolConfig("rep3pc", Partition(1, 2), n=2, seed=5), m, [1, 2])[1]
    assert a.to_jsonl() == b.to_jsonl()
    assert a.counters.snapshot() == b.counters.snapshot()


def test_server_sees_only_shares():
    m = tiny_model(12)
    _, tr = run_protocol(ProtocolConfig("dealer2pc", Partition(1, 2), n=1), m, [1, 2])
    senders = {e.sender for e in tr.server_received()}
    assert senders <= {"client", "oracle", "dealer", "server"}
    assert not any(e.receiver == "server" for e in tr.log)
