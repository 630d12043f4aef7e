"""Model config (JSON) and weight (MRLW binary) files.

Weight file layout, all little-endian:

    b"MRLW" | version u32 | tensor count u32
    per tensor: name length u16 | name utf-8 | rank u8 | dims u32 * rank | f32 data

Floats are encoded to fixed point when loaded.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import ring
from .model import PROJECTIONS, LayerWeights, Model, ModelConfig

MAGIC = b"MRLW"
VERSION = 1
LAYER_TENSORS = PROJECTIONS + ("attn_norm", "ffn_norm")


class WeightFileError(ValueError):
    pass


def load_config(path) -> ModelConfig:
    with open(path) as fh:
        return ModelConfig.from_dict(json.load(fh))


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def write_tensors(tensors: dict[str, np.ndarray], path) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise WeightFileError("not an MRLW weight file")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise WeightFileError(f"unsupported weight file version {version}")
        off = 12
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            n = int(np.prod(dims)) if dims else 1
            if off + 4 * n > len(data):
                raise WeightFileError(f"tensor {name!r} runs past end of file")
            out[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims).copy()
            off += 4 * n
    except struct.error as e:
        raise WeightFileError(f"truncated weight file: {e}") from None
    if off != len(data):
        raise WeightFileError("trailing bytes after last tensor")
    return out


def model_tensors(model: Model) -> dict[str, np.ndarray]:
    fmt = model.fmt
    dec = lambda a: ring.decode_array(a, fmt).astype(np.float32)  # noqa: E731
    out = {"embed": dec(model.embed), "pos_embed": dec(model.pos_embed)}
    for i, lw in enumerate(model.layers):
        for n in LAYER_TENSORS:
            out[f"layers.{i}.{n}"] = dec(lw.get(n))
        for n, (a, b) in sorted(lw.lora.items()):
            out[f"layers.{i}.{n}.lora_a"] = dec(a)
            out[f"layers.{i}.{n}.lora_b"] = dec(b)
    out["final_norm"] = dec(model.final_norm)
    out["head"] = dec(model.head)
    return out


def save_weights(model: Model, path) -> None:
    write_tensors(model_tensors(model), path)


def load_weights(cfg: ModelConfig, path) -> Model:
    t = read_tensors(path)
    fmt = cfg.fmt
    used = set()

    def take(name, shape):
        if name not in t:
            raise WeightFileError(f"missing tensor {name!r}")
        if t[name].shape != tuple(shape):
            raise WeightFileError(f"tensor {name!r} has shape {t[name].shape}, expected {tuple(shape)}")
        used.add(name)
        return ring.encode_array(t[name].astype(np.float64), fmt)

    hid, ffn = cfg.hidden, cfg.ffn_dim
    shapes = {
        "wq": (hid, hid), "wk": (hid, hid), "wv": (hid, hid), "wo": (hid, hid),
        "w1": (hid, ffn), "w2": (ffn, hid), "attn_norm": (hid,), "ffn_norm": (hid,),
    }
    layers = []
    for i in range(cfg.num_layers):
        w = {n: take(f"layers.{i}.{n}", shapes[n]) for n in LAYER_TENSORS}
        lora = {}
        for n in PROJECTIONS:
            ka, kb = f"layers.{i}.{n}.lora_a", f"layers.{i}.{n}.lora_b"
            if ka in t or kb in t:
                if ka not in t or kb not in t:
                    raise WeightFileError(f"layer {i} {n}: LoRA needs both factors")
                r = t[ka].shape[-1]
                lora[n] = (take(ka, (shapes[n][0], r)), take(kb, (r, shapes[n][1])))
        layers.append(LayerWeights(**w, heads=cfg.heads_of(i), lora=lora))
    model = Model(
        config=cfg,
        embed=take("embed", (cfg.vocab, hid)),
        pos_embed=take("pos_embed", (cfg.max_seq, hid)),
        layers=layers,
        final_norm=take("final_norm", (hid,)),
        head=take("head", (hid, cfg.vocab)),
    )
    extra = set(t) - used
    if extra:
        raise WeightFileError(f"unexpected tensors {sorted(extra)}")
    return model


def load_model(config_path, weights_path=None, seed: int = 0) -> Model:
    """Load a config and its weights, or random weights when no file is given."""
    cfg = load_config(config_path)
    if weights_path is None:
        return Model.random(cfg, seed)
    return load_weights(cfg, weights_path)
