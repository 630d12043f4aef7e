import numpy as np
import pytest

from conftest import tiny_config, tiny_model
from mpcmin import io as mio
from mpcmin.model import (
    Model,
    ModelConfig,
    ModelError,
    attention_maps,
    decode_step,
    generate,
    ideal_functionality,
    prefill,
)
from mpcmin.tensor import PlainEvaluator


def test_config_validation():
    with pytest.raises(ModelError):
        tiny_config(heads=0)
    with pytest.raises(ModelError):
        tiny_config(softmax="sparsemax")
    with pytest.raises(ModelError):
        tiny_config(layer_heads=[3, 2])
    with pytest.raises(ModelError):
        ModelConfig.from_dict({**tiny_config().to_dict(), "bogus": 1})
    cfg = tiny_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_generation_is_deterministic():
    m = tiny_model(3)
    assert generate(m, [1, 2, 3], 5) == generate(m, [1, 2, 3], 5)


def test_kv_cache_matches_recompute():
    m = tiny_model(4)
    prompt = [3, 1, 4, 1]
    out = generate(m, prompt, 4)
    # each step must equal a fresh prefill over the whole prefix
    seq = list(prompt)
    for tok in out:
        _, first = prefill(m, seq)
        assert first == tok
        seq.append(tok)


def test_prefill_counts_softmax_elements():
    m = tiny_model(5)
    ev = PlainEvaluator()
    prefill(m, [1, 2, 3, 4, 5], ev)
    cfg = m.config
    assert ev.counters.get("nonarith.SoftmaxExp", stage="prefill") == cfg.num_layers * cfg.heads * 25


def test_decode_state_checks():
    m = tiny_model(6)
    state, _ = prefill(m, [1, 2])
    state.tokens.append(3)
    with pytest.raises(ModelError):
        decode_step(m, state)


def test_token_and_length_errors():
    m = tiny_model(7)
    with pytest.raises(ModelError):
        prefill(m, [m.config.vocab])
    with pytest.raises(ModelError):
        prefill(m, [])
    with pytest.raises(ModelError):
        generate(m, [1] * 15, 5)


def test_ideal_functionality_feedback():
    m = tiny_model(8)
    assert ideal_functionality(m, 4, [2, 5]) == generate(m, [2, 5], 4)
    forced = ideal_functionality(m, 3, [2, 5], token_feedback=lambda outs: 0)
    state, y = prefill(m, [2, 5])
    state.tokens[-1] = 0
    y2 = decode_step(m, state)
    assert forced[:2] == [y, y2]
    with pytest.raises(ModelError):
        ideal_functionality(m, 2, [2], token_feedback=lambda outs: -1)


def test_attention_maps_are_causal_distributions():
    m = tiny_model(9)
    maps = attention_maps(m, [1, 2, 3, 4])
    assert [i for i, _, _ in maps] == [0, 1]
    for _, probs, valid in maps:
        assert probs.shape == (2, 4, 4)
        assert np.all(probs[:, ~valid] == 0)
        assert np.allclose(probs.sum(-1), 1, atol=4 * 2.0**-12)


def test_param_count():
    cfg = tiny_config()
    m = Model.random(cfg, 0)
    hid, ffn = cfg.hidden, cfg.ffn_dim
    per_layer = 4 * hid * hid + 2 * hid * ffn + 2 * hid
    assert m.param_count() == cfg.num_layers * per_layer + cfg.vocab * hid * 2 + cfg.max_seq * hid + hid
    assert m.param_count(attention_only=True) == cfg.num_layers * 4 * hid * hid


def test_weight_file_roundtrip(tmp_path):
    m = tiny_model(10)
    mio.save_config(m.config, tmp_path / "c.json")
    mio.save_weights(m, tmp_path / "w.mrlw")
    m2 = mio.load_model(tmp_path / "c.json", tmp_path / "w.mrlw")
    assert np.array_equal(m2.embed, m.embed)
    assert all(np.array_equal(a.wq, b.wq) for a, b in zip(m.layers, m2.layers))
    assert generate(m, [1, 2], 3) == generate(m2, [1, 2], 3)


def test_weight_file_layout(tmp_path):
    path = tmp_path / "w.mrlw"
    mio.write_tensors({"x": np.array([[1.5, -2.0]], dtype=np.float32)}, path)
    raw = path.read_bytes()
    assert raw[:4] == b"MRLW"
    assert raw[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert raw[12:14] == (1).to_bytes(2, "little") and raw[14:15] == b"x"
    assert raw[15] == 2 and raw[16:24] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.array_equal(np.frombuffer(raw[24:], "<f4"), [1.5, -2.0])


def test_weight_file_errors(tmp_path):
    bad = tmp_path / "bad.mrlw"
    bad.write_bytes(b"NOPE")
    with pytest.raises(mio.WeightFileError):
        mio.read_tensors(bad)
    good = tmp_path / "w.mrlw"
    mio.write_tensors({"x": np.zeros(3, np.float32)}, good)
    bad.write_bytes(good.read_bytes()[:-2])
    with pytest.raises(mio.WeightFileError):
        mio.read_tensors(bad)
    with pytest.raises(mio.WeightFileError):
        mio.load_weights(tiny_config(), good)
