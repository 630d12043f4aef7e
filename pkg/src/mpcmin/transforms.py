"""Architecture transforms that shrink the work done inside MPC.

* Layer freezing: only the top ``t`` of ``N`` layers (plus the output head)
  hold private weights; the client evaluates the rest in the clear.
* Split LoRA: a private rank-r adapter (A, B) next to a public base weight W,
  evaluated as X W + (X A) B and never merged.
* Head merging: groups of m heads become one head of width m*d by
  concatenating their Q/K/V columns (and permuting W_o rows to match).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import ring
from .model import PROJECTIONS, LayerWeights, Model, ModelConfig, ModelPart
from .similarity import HeadGrouping, pairwise_distances, similar_grouping
from .tensor import Evaluator, linear


class TransformError(ValueError):
    pass


@dataclass(frozen=True)
class Partition:
    private_layers: int
    total: int

    def __post_init__(self):
        if self.total < 1:
            raise TransformError("model needs at least one layer")
        if not 0 <= self.private_layers <= self.total:
            raise TransformError(f"cannot make {self.private_layers} of {self.total} layers private")

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.private_layers, self.total)

    @property
    def boundary(self) -> int:
        """Index of the first private layer."""
        return self.total - self.private_layers

    @property
    def private_ids(self) -> range:
        return range(self.boundary, self.total)

    @classmethod
    def parse(cls, text: str, total: int | None = None) -> "Partition":
        """Parse ``"t/N"`` (or a bare ``t`` when ``total`` is given)."""
        text = str(text).strip()
        if "/" in text:
            t, n = text.split("/", 1)
            p = cls(int(t), int(n))
            if total is not None and p.total != total:
                raise TransformError(f"freeze {text} does not match a {total}-layer model")
            return p
        if total is None:
            raise TransformError("freeze needs the form t/N")
        return cls(int(text), total)

    def __str__(self):
        return f"{self.private_layers}/{self.total}"


def split_model(model: Model, partition: Partition) -> tuple[ModelPart, ModelPart]:
    """Split into the client's public prefix and the server's private suffix.

    With t = N the public part is empty and the private part starts from
    one-hot token rows against the public embedding table.  With t = 0 the
    public part is the whole model and the private part is empty.
    """
    n = model.config.num_layers
    if partition.total != n:
        raise TransformError(f"partition is for {partition.total} layers, model has {n}")
    t = partition.private_layers
    if t == 0:
        return ModelPart(model, tuple(range(n)), embedding=True, head=True), ModelPart(model, (), private=True)
    if t == n:
        return (
            ModelPart(model, ()),
            ModelPart(model, tuple(range(n)), onehot_embedding=True, head=True, private=True),
        )
    pb = ModelPart(model, tuple(range(partition.boundary)), embedding=True)
    pr = ModelPart(model, tuple(partition.private_ids), head=True, private=True)
    return pb, pr


# -- LoRA ------------------------------------------------------------------------


@dataclass
class LoraAdapter:
    a: np.ndarray  # n x r
    b: np.ndarray  # r x k
    layer: int
    target: str

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def __post_init__(self):
        n, r = self.a.shape
        r2, k = self.b.shape
        if r != r2:
            raise TransformError("adapter factors disagree on rank")
        if not r < min(n, k):
            raise TransformError(f"rank {r} must be below min({n}, {k})")


def lora_forward(ev: Evaluator, x, w: np.ndarray, a, b):
    """X W + (X A) B with W public: the base product is free, the adapter path costs rows*r*(n+k)."""
    if a.shape[1] != b.shape[0] or w.shape != (a.shape[0], b.shape[1]):
        raise TransformError("adapter shapes do not match the base weight")
    if not a.shape[1] < min(w.shape):
        raise TransformError(f"rank {a.shape[1]} must be below min{w.shape}")
    with ev.site("linear"):
        base = linear(ev, x, w)
    with ev.site("lora"):
        return base + linear(ev, linear(ev, x, a), b)


def add_lora(
    model: Model,
    rank: int,
    layers: Sequence[int],
    targets: Sequence[str] = PROJECTIONS,
    seed: int = 0,
    scale: float = 0.05,
) -> Model:
    """Attach random rank-``rank`` adapters, standing in for fine-tuned ones."""
    unknown = set(targets) - set(PROJECTIONS)
    if unknown:
        raise TransformError(f"unknown LoRA targets {sorted(unknown)}")
    out = copy.deepcopy(model)
    rng = np.random.default_rng(seed)
    fmt = model.fmt
    for i in layers:
        lw = out.layers[i]
        for name in targets:
            n, k = lw.get(name).shape
            a = ring.encode_array(rng.normal(0.0, scale, size=(n, rank)), fmt)
            b = ring.encode_array(rng.normal(0.0, scale, size=(rank, k)), fmt)
            LoraAdapter(a, b, i, name)
            lw.lora[name] = (a, b)
    return out


# -- head merging ------------------------------------------------------------------


def _head_columns(perm: Sequence[int], d: int) -> np.ndarray:
    return np.concatenate([np.arange(p * d, (p + 1) * d) for p in perm])


def merge_layer(lw: LayerWeights, grouping: HeadGrouping, head_dim: int) -> LayerWeights:
    if grouping.heads != lw.heads:
        raise TransformError(f"grouping covers {grouping.heads} heads, layer has {lw.heads}")
    cols = _head_columns(grouping.permutation, head_dim)
    new = copy.deepcopy(lw)
    for name in ("wq", "wk", "wv"):
        setattr(new, name, lw.get(name)[:, cols].copy())
        if name in lw.lora:
            a, b = lw.lora[name]
            new.lora[name] = (a.copy(), b[:, cols].copy())
    new.wo = lw.wo[cols, :].copy()
    if "wo" in lw.lora:
        a, b = lw.lora["wo"]
        new.lora["wo"] = (a[cols, :].copy(), b.copy())
    new.heads = lw.heads // grouping.m
    return new


def merge_heads(model: Model, groupings: dict[int, HeadGrouping]) -> Model:
    """Merge heads in the given layers; every other layer is left untouched.

    Summing the per-head logits Q_l K_l^T over a group equals one product of
    the concatenated Q and K blocks, so the merged layer is a standard
    attention with h/m heads of width m*d and scale 1/sqrt(m*d).
    """
    cfg = model.config
    layer_heads = [lw.heads for lw in model.layers]
    out = copy.copy(model)
    out.layers = list(model.layers)
    for i, g in groupings.items():
        lw = model.layers[i]
        if lw.heads != cfg.heads:
            raise TransformError(f"layer {i} is already merged")
        if cfg.heads % g.m:
            raise TransformError(f"merge factor {g.m} does not divide {cfg.heads}")
        out.layers[i] = merge_layer(lw, g, cfg.head_dim)
        layer_heads[i] = out.layers[i].heads
    new_cfg = ModelConfig.from_dict({**cfg.to_dict(), "layer_heads": layer_heads})
    if all(h == cfg.heads for h in layer_heads):
        new_cfg.layer_heads = None
    out.config = new_cfg
    return out


# -- manifest -----------------------------------------------------------------------


@dataclass
class TransformManifest:
    freeze: str | None = None  # "t/N"
    lora_rank: int = 0
    lora_targets: list[str] = field(default_factory=lambda: list(PROJECTIONS))
    merge: int = 1
    grouping: object = "adjacent"  # "adjacent" | "similar" | {layer: permutation}
    seed: int = 0
    calibration_prompts: int = 4
    calibration_len: int = 8
    applied: bool = False

    def to_dict(self) -> dict:
        grouping = self.grouping
        if isinstance(grouping, dict):
            grouping = {str(k): list(v) for k, v in sorted(grouping.items(), key=lambda kv: int(kv[0]))}
        return {
            "freeze": self.freeze,
            "lora": {"rank": self.lora_rank, "targets": list(self.lora_targets)} if self.lora_rank else None,
            "head_merge": {"m": self.merge, "grouping": grouping},
            "seed": self.seed,
            "calibration": {"prompts": self.calibration_prompts, "length": self.calibration_len},
            "applied": self.applied,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformManifest":
        lora = d.get("lora") or {}
        merge = d.get("head_merge") or {}
        cal = d.get("calibration") or {}
        grouping = merge.get("grouping", "adjacent")
        if isinstance(grouping, dict):
            grouping = {int(k): [int(x) for x in v] for k, v in grouping.items()}
        elif isinstance(grouping, str) and grouping not in ("adjacent", "similar"):
            raise TransformError(f"unknown grouping {grouping!r}")
        return cls(
            freeze=d.get("freeze"),
            lora_rank=int(lora.get("rank", 0)),
            lora_targets=list(lora.get("targets", PROJECTIONS)),
            merge=int(merge.get("m", 1)),
            grouping=grouping,
            seed=int(d.get("seed", 0)),
            calibration_prompts=int(cal.get("prompts", 4)),
            calibration_len=int(cal.get("length", 8)),
            applied=bool(d.get("applied", False)),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def calibration_prompts(cfg: ModelConfig, count: int, length: int, seed: int) -> list[list[int]]:
    rng = np.random.default_rng([seed, 7])
    length = min(length, cfg.max_seq)
    return [rng.integers(0, cfg.vocab, size=length).tolist() for _ in range(count)]


def resolve_groupings(model: Model, manifest: TransformManifest, layers: Sequence[int]) -> dict[int, HeadGrouping]:
    h, m = model.config.heads, manifest.merge
    if m == 1 or not layers:
        return {}
    if h % m:
        raise TransformError(f"merge factor {m} does not divide {h} heads")
    g = manifest.grouping
    if g == "adjacent":
        return {i: HeadGrouping.adjacent(h, m) for i in layers}
    if g == "similar":
        prompts = calibration_prompts(model.config, manifest.calibration_prompts, manifest.calibration_len, manifest.seed)
        dms = pairwise_distances(model, prompts, layers)
        return {dm.layer: similar_grouping(dm.values, m, seed=manifest.seed + dm.layer) for dm in dms}
    if isinstance(g, dict):
        missing = [i for i in layers if i not in g]
        if missing:
            raise TransformError(f"explicit grouping lacks layers {missing}")
        return {i: HeadGrouping(m, list(g[i])) for i in layers}
    raise TransformError(f"unknown grouping {g!r}")


def apply_manifest(model: Model, manifest: TransformManifest) -> tuple[Model, Partition, TransformManifest]:
    """Apply freeze, head merging (private layers only) and LoRA, in that order.

    Returns the transformed model, its partition and a manifest with the
    chosen permutations spelled out, so the run can be reproduced.
    """
    n = model.config.num_layers
    partition = Partition.parse(manifest.freeze, n) if manifest.freeze else Partition(n, n)
    resolved = copy.deepcopy(manifest)
    if manifest.applied:
        return model, partition, resolved
    private = list(partition.private_ids)
    groupings = resolve_groupings(model, manifest, private)
    if groupings:
        model = merge_heads(model, groupings)
        resolved.grouping = {i: g.permutation for i, g in groupings.items()}
    if manifest.lora_rank:
        model = add_lora(model, manifest.lora_rank, private, manifest.lora_targets, seed=manifest.seed)
    resolved.freeze = str(partition)
    return model, partition, resolved
