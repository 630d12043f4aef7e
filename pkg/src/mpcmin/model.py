"""A toy decoder-only transformer that runs under either evaluator.

Layers are pre-norm (RMSNorm) with causal multi-head attention, a two-matrix
MLP and learned absolute position embeddings.  Weights live in the ring as
fixed-point uint64 tensors.  Sampling is greedy with lowest-index ties.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import ring
from .approx import ACTIVATION_KINDS, DEFAULT_QUAD, SOFTMAX_KINDS
from .ring import FixedPointFormat
from .tensor import Evaluator, PlainEvaluator, activation, linear, rmsnorm, softmax_rows

PROJECTIONS = ("wq", "wk", "wv", "wo", "w1", "w2")


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_layers: int
    heads: int
    head_dim: int
    ffn_dim: int
    vocab: int
    max_seq: int
    activation: str = "silu"
    softmax: str = "exact"
    norm: str = "rmsnorm"
    scale_bits: int = 12
    softmax_param: float | None = None
    quad_coeffs: tuple[float, float, float] = DEFAULT_QUAD
    norm_eps: float = 1e-5
    # per-layer head counts after merging; None means `heads` everywhere
    layer_heads: list[int] | None = None

    def __post_init__(self):
        self.quad_coeffs = tuple(self.quad_coeffs)
        self.validate()

    @property
    def hidden(self) -> int:
        return self.heads * self.head_dim

    @property
    def fmt(self) -> FixedPointFormat:
        return FixedPointFormat(self.scale_bits)

    def heads_of(self, layer: int) -> int:
        return self.heads if self.layer_heads is None else self.layer_heads[layer]

    def validate(self) -> None:
        for name in ("num_layers", "heads", "head_dim", "ffn_dim", "vocab", "max_seq"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.activation not in ACTIVATION_KINDS:
            raise ModelError(f"unknown activation {self.activation!r}")
        if self.softmax not in SOFTMAX_KINDS:
            raise ModelError(f"unknown softmax {self.softmax!r}")
        if self.norm != "rmsnorm":
            raise ModelError("only rmsnorm is supported")
        FixedPointFormat(self.scale_bits)
        if self.layer_heads is not None:
            if len(self.layer_heads) != self.num_layers:
                raise ModelError("layer_heads needs one entry per layer")
            for h in self.layer_heads:
                if h < 1 or self.heads % h:
                    raise ModelError(f"layer head count {h} must divide {self.heads}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quad_coeffs"] = list(self.quad_coeffs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    attn_norm: np.ndarray
    ffn_norm: np.ndarray
    heads: int
    lora: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def get(self, name: str) -> np.ndarray:
        return getattr(self, name)


@dataclass
class Model:
    config: ModelConfig
    embed: np.ndarray
    pos_embed: np.ndarray
    layers: list[LayerWeights]
    final_norm: np.ndarray
    head: np.ndarray

    @property
    def fmt(self) -> FixedPointFormat:
        return self.config.fmt

    @property
    def uses_lora(self) -> bool:
        return any(lw.lora for lw in self.layers)

    @classmethod
    def random(cls, config: ModelConfig, seed: int = 0, gain_jitter: float = 0.1) -> "Model":
        rng = np.random.default_rng(seed)
        fmt = config.fmt
        hid, ffn = config.hidden, config.ffn_dim

        def mat(n, k):
            return ring.encode_array(rng.normal(0.0, 1.0 / math.sqrt(n), size=(n, k)), fmt)

        def gain(n):
            return ring.encode_array(1.0 + gain_jitter * rng.normal(size=n), fmt)

        layers = []
        for i in range(config.num_layers):
            layers.append(
                LayerWeights(
                    wq=mat(hid, hid), wk=mat(hid, hid), wv=mat(hid, hid), wo=mat(hid, hid),
                    w1=mat(hid, ffn), w2=mat(ffn, hid),
                    attn_norm=gain(hid), ffn_norm=gain(hid),
                    heads=config.heads_of(i),
                )
            )
        return cls(
            config=config,
            embed=ring.encode_array(rng.normal(size=(config.vocab, hid)), fmt),
            pos_embed=ring.encode_array(0.1 * rng.normal(size=(config.max_seq, hid)), fmt),
            layers=layers,
            final_norm=gain(hid),
            head=mat(hid, config.vocab),
        )

    def param_count(self, attention_only: bool = False) -> int:
        names = ("wq", "wk", "wv", "wo") if attention_only else PROJECTIONS + ("attn_norm", "ffn_norm")
        total = sum(lw.get(n).size for lw in self.layers for n in names)
        if not attention_only:
            total += sum(a.size + b.size for lw in self.layers for a, b in lw.lora.values())
            total += self.embed.size + self.pos_embed.size + self.final_norm.size + self.head.size
        return total


# -- execution -----------------------------------------------------------------


@dataclass
class ModelPart:
    """A contiguous slice of the model evaluated by one party or the engine.

    ``embedding``: the part starts from token ids (client side, plaintext
    lookup).  ``onehot_embedding``: the part starts from one-hot token rows and
    applies the public embedding table as a matmul.  ``head``: the part ends
    with the final norm, output head and greedy argmax.  ``private``: weights of
    the part are secret inputs of the server.
    """

    model: Model
    layer_ids: tuple[int, ...]
    embedding: bool = False
    onehot_embedding: bool = False
    head: bool = False
    private: bool = False

    @property
    def empty(self) -> bool:
        return not (self.layer_ids or self.embedding or self.onehot_embedding or self.head)


def full_part(model: Model) -> ModelPart:
    return ModelPart(model, tuple(range(model.config.num_layers)), embedding=True, head=True)


@dataclass
class BoundLayer:
    index: int
    heads: int
    w: dict
    lora: dict


@dataclass
class LayerCache:
    k: object = None
    v: object = None

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[0]


def causal_valid(start: int, rows: int, length: int) -> np.ndarray:
    q = np.arange(start, start + rows)[:, None]
    k = np.arange(length)[None, :]
    return k <= q


class PartRunner:
    """Binds a ModelPart to an evaluator and keeps its KV caches."""

    def __init__(self, ev: Evaluator, part: ModelPart, setup_stage: str = "offline"):
        self.ev = ev
        self.part = part
        self.cfg = part.model.config
        self.position = 0
        model = part.model
        with ev.stage(setup_stage):
            self.layers = [self._bind_layer(i, model.layers[i]) for i in part.layer_ids]
            head_private = part.private and not model.uses_lora
            self.final_norm = self._maybe_private(model.final_norm, head_private) if part.head else None
            self.head = self._maybe_private(model.head, head_private) if part.head else None
        self.caches = [LayerCache() for _ in self.layers]
        # populated only for plaintext runs that ask for attention maps
        self.capture: list | None = None

    def _maybe_private(self, w, private: bool):
        return self.ev.input_private(w, owner="server") if private else w

    def _bind_layer(self, idx: int, lw: LayerWeights) -> BoundLayer:
        private = self.part.private
        base_private = private and not lw.lora
        w = {n: self._maybe_private(lw.get(n), base_private) for n in PROJECTIONS + ("attn_norm", "ffn_norm")}
        lora = {}
        for n, (a, b) in lw.lora.items():
            lora[n] = (self._maybe_private(a, private), self._maybe_private(b, private))
        return BoundLayer(idx, lw.heads, w, lora)

    # -- pieces -----------------------------------------------------------

    def _proj(self, x, bl: BoundLayer, name: str):
        ev = self.ev
        with ev.site("linear"):
            y = linear(ev, x, bl.w[name])
        if name in bl.lora:
            a, b = bl.lora[name]
            with ev.site("lora"):
                y = y + linear(ev, linear(ev, x, a), b)
        return y

    def _attention(self, x, bl: BoundLayer, cache: LayerCache, start: int):
        ev, cfg = self.ev, self.cfg
        rows, hid = x.shape
        q = self._proj(x, bl, "wq")
        k = self._proj(x, bl, "wk")
        v = self._proj(x, bl, "wv")
        cache.k = k if cache.k is None else ev.concat([cache.k, k], axis=0)
        cache.v = v if cache.v is None else ev.concat([cache.v, v], axis=0)
        length = cache.length
        h = bl.heads
        dh = hid // h
        qh = q.reshape(rows, h, dh).transpose(1, 0, 2)
        kh = cache.k.reshape(length, h, dh).transpose(1, 2, 0)
        vh = cache.v.reshape(length, h, dh).transpose(1, 0, 2)
        fmt = ev.fmt
        scale = np.uint64(ring.encode(1.0 / math.sqrt(dh), fmt))
        with ev.site("attn_logits"):
            raw = ev.private_matmul(qh, kh)
            logits = ev.trunc(ev.mul_public(raw, scale), 2 * fmt.scale_bits)
        valid = causal_valid(start, rows, length)
        with ev.site("attn_softmax"):
            probs = softmax_rows(ev, logits, valid, kind=cfg.softmax, param=cfg.softmax_param)
        if self.capture is not None:
            self.capture.append((bl.index, probs, valid))
        with ev.site("attn_context"):
            ctx = ev.trunc(ev.private_matmul(probs, vh))
        ctx = ctx.transpose(1, 0, 2).reshape(rows, hid)
        return self._proj(ctx, bl, "wo")

    def _layer(self, x, bl: BoundLayer, cache: LayerCache, start: int):
        ev, cfg = self.ev, self.cfg
        with ev.site("norm"):
            hn = rmsnorm(ev, x, bl.w["attn_norm"], cfg.norm_eps)
        x = x + self._attention(hn, bl, cache, start)
        with ev.site("norm"):
            hn = rmsnorm(ev, x, bl.w["ffn_norm"], cfg.norm_eps)
        u = self._proj(hn, bl, "w1")
        with ev.site("ffn_act"):
            a = activation(ev, u, cfg.activation, cfg.quad_coeffs)
        return x + self._proj(a, bl, "w2")

    # -- entry points -----------------------------------------------------

    def embed_tokens(self, tokens: Sequence[int], start: int) -> np.ndarray:
        model = self.part.model
        ids = np.asarray(tokens, dtype=np.int64)
        return model.embed[ids] + model.pos_embed[start : start + len(ids)]

    def run(self, inputs, rows: int | None = None):
        """Advance the part over new positions.

        ``inputs`` is a token list when the part starts at the embedding, a
        one-hot ring matrix for a one-hot embedding part, and hidden-state rows
        otherwise.  Returns the greedy token when the part ends with the head,
        else the hidden rows.
        """
        ev, part, model = self.ev, self.part, self.part.model
        start = self.position
        n = len(inputs) if isinstance(inputs, (list, tuple)) else inputs.shape[0]
        if start + n > self.cfg.max_seq:
            raise ModelError(f"sequence length {start + n} exceeds max_seq {self.cfg.max_seq}")
        if part.embedding:
            x = self.embed_tokens(inputs, start)
        elif part.onehot_embedding:
            with ev.site("embed"):
                x = linear(ev, inputs, model.embed)
            x = x + model.pos_embed[start : start + x.shape[0]]
        else:
            x = inputs
        for bl, cache in zip(self.layers, self.caches):
            if cache.length != start:
                raise ModelError("KV cache length disagrees with position")
            x = self._layer(x, bl, cache, start)
        self.position = start + n
        if not part.head:
            return x
        last = x[n - 1 : n]
        with ev.site("norm"):
            hn = rmsnorm(ev, last, self.final_norm, self.cfg.norm_eps)
        with ev.site("head"):
            logits = linear(ev, hn, self.head)
            return ev.reveal_argmax(logits)


def onehot(tokens: Sequence[int], vocab: int, fmt: FixedPointFormat) -> np.ndarray:
    out = np.zeros((len(tokens), vocab), dtype=np.uint64)
    out[np.arange(len(tokens)), np.asarray(tokens, dtype=np.int64)] = np.uint64(fmt.scale)
    return out


def check_tokens(tokens: Sequence[int], vocab: int) -> None:
    for t in tokens:
        if not (isinstance(t, (int, np.integer)) and 0 <= int(t) < vocab):
            raise ModelError(f"token {t!r} outside vocabulary of size {vocab}")


# -- plaintext API ---------------------------------------------------------------


@dataclass
class GenerationState:
    runner: PartRunner
    tokens: list[int]

    @property
    def position(self) -> int:
        return self.runner.position

    @property
    def caches(self):
        return self.runner.caches


def prefill(model: Model, prompt: Sequence[int], ev: Evaluator | None = None) -> tuple[GenerationState, int]:
    prompt = list(prompt)
    if not prompt:
        raise ModelError("empty prompt")
    check_tokens(prompt, model.config.vocab)
    if len(prompt) > model.config.max_seq:
        raise ModelError("prompt longer than max_seq")
    ev = ev if ev is not None else PlainEvaluator(model.fmt)
    runner = PartRunner(ev, full_part(model))
    with ev.stage("prefill"):
        tok = runner.run(prompt)
    return GenerationState(runner, prompt + [tok]), tok


def decode_step(model: Model, state: GenerationState) -> int:
    pending = state.tokens[state.position :]
    if len(pending) != 1 or state.position == 0:
        raise ModelError(f"state inconsistent: {len(pending)} unprocessed tokens at position {state.position}")
    check_tokens(pending, model.config.vocab)
    with state.runner.ev.stage("decode"):
        tok = state.runner.run(pending)
    state.tokens.append(tok)
    return tok


def generate(model: Model, prompt: Sequence[int], n: int, ev: Evaluator | None = None) -> list[int]:
    if n < 1:
        raise ModelError("n must be >= 1")
    state, tok = prefill(model, prompt, ev)
    out = [tok]
    for _ in range(n - 1):
        out.append(decode_step(model, state))
    return out


def ideal_functionality(
    model: Model,
    n: int,
    prompt: Sequence[int],
    token_feedback: Callable[[list[int]], int] | None = None,
) -> list[int]:
    """Reference secure-inference functionality, computed in plaintext fixed point.

    After the first token, each decoding step consumes a token supplied by the
    client (``token_feedback(outputs_so_far)``); by default the client feeds
    back the last output, which is the semi-honest behaviour.
    """
    if n < 1:
        raise ModelError("n must be >= 1")
    state, y = prefill(model, prompt)
    outputs = [y]
    for _ in range(1, n):
        x = outputs[-1] if token_feedback is None else token_feedback(list(outputs))
        check_tokens([x], model.config.vocab)
        state.tokens[-1] = int(x)
        outputs.append(decode_step(model, state))
    return outputs


def attention_maps(model: Model, prompt: Sequence[int]) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Decoded attention probabilities (layer, heads x b x b, valid mask) for one prompt."""
    ev = PlainEvaluator(model.fmt)
    runner = PartRunner(ev, full_part(model))
    runner.capture = []
    with ev.stage("prefill"):
        runner.run(list(prompt))
    return [(i, ring.decode_array(p, model.fmt), valid) for i, p, valid in runner.capture]
