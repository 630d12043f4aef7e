"""End-to-end secure inference with a public prefix and a private suffix.

The client evaluates the public bottom layers in plaintext fixed point,
secret-shares the resulting hidden rows into the engine, the private top
layers and head run under MPC, and the greedy token is revealed to the client
only.  Each decoding step repeats this for the previous output token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .accounting import Counters
from .costing import CostReport, CostTable
from .model import Model, ModelError, PartRunner, check_tokens, onehot
from .sharing import Engine, TranscriptEntry
from .tensor import PlainEvaluator, SharedEvaluator
from .transforms import Partition, split_model


@dataclass
class ProtocolConfig:
    backend: str = "dealer2pc"
    partition: Partition | None = None  # None: every layer private
    n: int = 1
    seed: int = 0
    manifest: dict | None = None
    triple_budget: int | None = None
    # test hook: (party, payload) -> True makes that party reject the message
    abort_hook: Callable | None = None

    def validate(self, model: Model) -> Partition:
        if self.n < 1:
            raise ModelError("n must be >= 1")
        n_layers = model.config.num_layers
        p = self.partition or Partition(n_layers, n_layers)
        if p.total != n_layers:
            raise ModelError(f"partition {p} does not match a {n_layers}-layer model")
        if self.manifest and self.manifest.get("freeze") not in (None, str(p)):
            raise ModelError(f"manifest freeze {self.manifest['freeze']} disagrees with partition {p}")
        return p


@dataclass
class Transcript:
    backend: str
    partition: str
    log: list[TranscriptEntry]
    counters: Counters
    # plaintext work done by the client on the public prefix
    client_counters: Counters
    tokens: list[int] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(
                {"step": e.step, "from": e.sender, "to": e.receiver, "bytes": e.size, "stage": e.stage, "site": e.site},
                sort_keys=True,
            )
            + "\n"
            for e in self.log
        )

    def bytes_by_stage(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.log:
            out[e.stage] = out.get(e.stage, 0) + e.size
        return out

    def server_received(self) -> list[TranscriptEntry]:
        """Messages delivered to computing parties from outside the MPC (client, oracle)."""
        return [e for e in self.log if e.receiver.startswith("P") and not e.sender.startswith("P")]


def run_protocol(cfg: ProtocolConfig, model: Model, prompt: Sequence[int]) -> tuple[list[int], Transcript]:
    partition = cfg.validate(model)
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ModelError("empty prompt")
    check_tokens(prompt, model.config.vocab)
    if len(prompt) + cfg.n - 1 > model.config.max_seq:
        raise ModelError("prompt plus generated tokens exceed max_seq")

    fmt = model.fmt
    counters = Counters()
    client_counters = Counters()
    engine = Engine(cfg.backend, seed=cfg.seed, fmt=fmt, counters=counters, triple_budget=cfg.triple_budget)
    engine.abort_hook = cfg.abort_hook
    client_ev = PlainEvaluator(fmt, client_counters)
    pb, pr = split_model(model, partition)
    client = None if pb.empty else PartRunner(client_ev, pb)
    server = None if pr.empty else PartRunner(SharedEvaluator(engine), pr)

    def step(stage: str, tokens: list[int]) -> int:
        with client_ev.stage(stage), engine.counters.stage(stage):
            if server is None:
                return client.run(tokens)
            if client is None:
                x = onehot(tokens, model.config.vocab, fmt)
            else:
                x = client.run(tokens)
            with counters.site("embed"):
                shared = engine.share(x, owner="client")
            return server.run(shared)

    outputs = [step("prefill", prompt)]
    for _ in range(1, cfg.n):
        outputs.append(step("decode", [outputs[-1]]))

    transcript = Transcript(
        backend=engine.kind.value,
        partition=str(partition),
        log=list(engine.network.log),
        counters=counters,
        client_counters=client_counters,
        tokens=list(outputs),
    )
    if engine.network.pending():
        raise RuntimeError("undelivered messages left on the network")
    return outputs, transcript


def record_stage_costs(
    transcript: Transcript, table: CostTable | None = None, scenario: str = "run"
) -> tuple[CostReport, CostReport]:
    """(prefill, decode) reports; offline setup traffic belongs to neither."""
    pre = CostReport.from_counters(transcript.counters, table, transcript.backend, scenario, stages=("prefill",))
    dec = CostReport.from_counters(transcript.counters, table, transcript.backend, scenario, stages=("decode",))
    return pre, dec


def stage_report(transcript: Transcript, table: CostTable | None = None, scenario: str = "run") -> CostReport:
    return CostReport.from_counters(transcript.counters, table, transcript.backend, scenario)
