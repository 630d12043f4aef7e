import json

import numpy as np
import pytest

from conftest import tiny_model
from mpcmin import ring
from mpcmin.model import PartRunner, attention_maps, generate, onehot
from mpcmin.similarity import HeadGrouping
from mpcmin.tensor import PlainEvaluator, Private
from mpcmin.transforms import (
    LoraAdapter,
    Partition,
    TransformError,
    TransformManifest,
    add_lora,
    apply_manifest,
    lora_forward,
    merge_heads,
    split_model,
)


def test_partition_basics():
    p = Partition.parse("13/26")
    assert (p.private_layers, p.total, p.boundary) == (13, 26, 13)
    assert float(p.fraction) == 0.5
    assert list(Partition(2, 4).private_ids) == [2, 3]
    assert str(Partition.parse("3", total=4)) == "3/4"
    with pytest.raises(TransformError):
        Partition(5, 4)
    with pytest.raises(TransformError):
        Partition.parse("2/4", total=6)


def run_split(model, partition, prompt):
    pb, pr = split_model(model, partition)
    ev = PlainEvaluator(model.fmt)
    if pr.empty:
        return PartRunner(ev, pb).run(prompt)
    if pb.empty:
        x = onehot(prompt, model.config.vocab, model.fmt)
    else:
        x = PartRunner(ev, pb).run(prompt)
    return PartRunner(ev, pr).run(x)


@pytest.mark.parametrize("t", [0, 1, 2, 3, 4])
def test_split_composition_is_exact(t):
    m = tiny_model(1, num_layers=4)
    prompt = [1, 5, 7, 2]
    assert run_split(m, Partition(t, 4), prompt) == generate(m, prompt, 1)[0]


def test_split_structure():
    m = tiny_model(2, num_layers=4)
    pb, pr = split_model(m, Partition(4, 4))
    assert pb.empty and pr.onehot_embedding and pr.head
    pb, pr = split_model(m, Partition(0, 4))
    assert pr.empty and pb.head and pb.embedding
    pb, pr = split_model(m, Partition(1, 4))
    assert pb.layer_ids == (0, 1, 2) and pr.layer_ids == (3,) and pr.private
    with pytest.raises(TransformError):
        split_model(m, Partition(1, 3))


def test_onehot_embedding_matches_lookup(rng):
    m = tiny_model(3)
    toks = [0, 3, 15, 3]
    ev = PlainEvaluator()
    from mpcmin.tensor import linear

    assert np.array_equal(linear(ev, onehot(toks, 16, m.fmt), m.embed), m.embed[toks])


def _lora_instance(rng, rows, n, k, r):
    x = ring.encode_array(rng.normal(size=(rows, n)))
    w = ring.encode_array(rng.normal(size=(n, k)) / np.sqrt(n))
    a = ring.encode_array(rng.normal(size=(n, r)) * 0.1)
    b = ring.encode_array(rng.normal(size=(r, k)) * 0.1)
    return x, w, a, b


def test_lora_forward_matches_merged_oracle(rng):
    for _ in range(30):
        rows, n, k, r = rng.integers(1, 4), rng.integers(3, 8), rng.integers(3, 8), 2
        x, w, a, b = _lora_instance(rng, rows, n, k, r)
        ev = PlainEvaluator()
        out = lora_forward(ev, x, w, Private(a), Private(b))
        dec = ring.decode_array
        ref = dec(x) @ (dec(w) + dec(a) @ dec(b))
        # one floor per truncation point; the X@A floor is then scaled by B
        bound = (2 + np.abs(dec(b)).sum(axis=0)) * 2.0**-12
        assert np.all(np.abs(dec(out) - ref) <= bound)
        assert ev.counters.get("triple_mults") == rows * r * (n + k)


def test_lora_zero_adapter_is_exact(rng):
    x, w, a, b = _lora_instance(rng, 2, 5, 6, 2)
    a[:] = 0
    ev = PlainEvaluator()
    assert np.array_equal(lora_forward(ev, x, w, a, b), ring.truncate_array(x @ w, 12))


def test_lora_rank_violation(rng):
    x, w, a, b = _lora_instance(rng, 1, 4, 4, 4)
    with pytest.raises(TransformError):
        lora_forward(PlainEvaluator(), x, w, a, b)
    with pytest.raises(TransformError):
        LoraAdapter(a, b, 0, "wq")
    with pytest.raises(TransformError):
        add_lora(tiny_model(), 2, [0], targets=["embed"])


def test_add_lora_only_touches_given_layers():
    m = tiny_model(4, num_layers=3)
    out = add_lora(m, 2, [2])
    assert not out.layers[0].lora and set(out.layers[2].lora) == {"wq", "wk", "wv", "wo", "w1", "w2"}
    assert not m.uses_lora


def test_merge_identity_is_bit_identical():
    m = tiny_model(5, heads=4)
    merged = merge_heads(m, {i: HeadGrouping.adjacent(4, 1) for i in range(2)})
    assert generate(merged, [1, 2, 3], 3) == generate(m, [1, 2, 3], 3)


def _float_rmsnorm(x, g, eps=1e-5):
    return x / np.sqrt((x**2).mean(-1, keepdims=True) + eps) * g


@pytest.mark.parametrize("perm", [[0, 1], [1, 0]])
def test_merged_attention_matches_group_formula(perm):
    # b=2, h=2, d=1, m=2: one merged head sums both heads' logits
    m = tiny_model(6, heads=2, head_dim=1, num_layers=1)
    merged = merge_heads(m, {0: HeadGrouping(2, perm)})
    prompt = [3, 9]
    (_, probs, _), = attention_maps(merged, prompt)
    dec = lambda a: ring.decode_array(a, m.fmt)  # noqa: E731
    lw = m.layers[0]
    x = dec(m.embed)[prompt] + dec(m.pos_embed)[:2]
    hn = _float_rmsnorm(x, dec(lw.attn_norm))
    q, k = hn @ dec(lw.wq), hn @ dec(lw.wk)
    logits = sum(np.outer(q[:, l], k[:, l]) for l in perm) / np.sqrt(2 * 1)
    logits = np.where(np.tril(np.ones((2, 2), bool)), logits, -np.inf)
    ref = np.exp(logits - logits.max(-1, keepdims=True))
    ref /= ref.sum(-1, keepdims=True)
    assert probs.shape == (1, 2, 2)
    assert np.max(np.abs(probs[0] - ref)) < 5e-3


def test_merge_with_permutation_matches_formula_larger(rng):
    m = tiny_model(7, heads=4, head_dim=2, num_layers=1)
    perm = [2, 0, 3, 1]
    merged = merge_heads(m, {0: HeadGrouping(2, perm)})
    prompt = [1, 4, 2, 8]
    (_, probs, _), = attention_maps(merged, prompt)
    dec = lambda a: ring.decode_array(a, m.fmt)  # noqa: E731
    lw = m.layers[0]
    hn = _float_rmsnorm(dec(m.embed)[prompt] + dec(m.pos_embed)[:4], dec(lw.attn_norm))
    q, k = hn @ dec(lw.wq), hn @ dec(lw.wk)
    mask = np.tril(np.ones((4, 4), bool))
    for j, group in enumerate([perm[:2], perm[2:]]):
        logits = sum(q[:, 2 * l : 2 * l + 2] @ k[:, 2 * l : 2 * l + 2].T for l in group) / np.sqrt(4)
        logits = np.where(mask, logits, -np.inf)
        ref = np.exp(logits - logits.max(-1, keepdims=True))
        ref /= ref.sum(-1, keepdims=True)
        assert np.max(np.abs(probs[j] - ref)) < 1e-2


def test_merge_preserves_params_and_checks():
    m = add_lora(tiny_model(8, heads=4), 1, [0, 1])
    merged = merge_heads(m, {1: HeadGrouping(4, [3, 1, 0, 2])})
    assert merged.param_count() == m.param_count()
    assert merged.param_count(attention_only=True) == m.param_count(attention_only=True)
    assert merged.config.layer_heads == [4, 1]
    assert merged.layers[1].wq.shape == m.layers[1].wq.shape
    with pytest.raises(TransformError):
        merge_heads(merged, {1: HeadGrouping(1, [0])})
    with pytest.raises(TransformError):
        merge_heads(tiny_model(heads=3, head_dim=2), {0: HeadGrouping(2, [0, 1])})


def test_merge_with_lora_keeps_function():
    m = add_lora(tiny_model(9, heads=4), 1, [0, 1])
    merged = merge_heads(m, {i: HeadGrouping(1, [2, 0, 3, 1]) for i in range(2)})
    # m=1 with a permutation only reorders heads, so outputs are unchanged
    assert generate(merged, [4, 4, 1], 3) == generate(m, [4, 4, 1], 3)


def test_manifest_roundtrip_and_apply():
    m = tiny_model(10, heads=4, num_layers=4)
    man = TransformManifest(freeze="2/4", lora_rank=2, merge=2, grouping="similar", seed=3)
    out, part, resolved = apply_manifest(m, man)
    assert str(part) == "2/4"
    assert out.config.layer_heads == [4, 4, 2, 2]
    assert not out.layers[0].lora and out.layers[3].lora
    d = json.loads(resolved.dumps())
    assert d["head_merge"]["m"] == 2 and set(d["head_merge"]["grouping"]) == {"2", "3"}
    again, _, _ = apply_manifest(m, TransformManifest.from_dict(d))
    assert all(np.array_equal(a.wq, b.wq) for a, b in zip(out.layers, again.layers))
    with pytest.raises(TransformError):
        TransformManifest.from_dict({"head_merge": {"m": 2, "grouping": "random"}})
    with pytest.raises(TransformError):
        apply_manifest(m, TransformManifest(freeze="2/4", merge=3))
