"""Operation counters shared by the plaintext and secret-shared evaluators."""

from __future__ import annotations

from collections import Counter, defaultdict
from contextlib import contextmanager
from enum import Enum


class NonArithKind(str, Enum):
    TRUNC = "Trunc"
    SOFTMAX_EXP = "SoftmaxExp"
    SOFTMAX_DIV = "SoftmaxDiv"
    GELU = "Gelu"
    SILU = "Silu"
    RELU = "Relu"
    COMPARE = "Compare"
    RSQRT = "Rsqrt"


STAGES = ("prefill", "decode")

# Sites whose non-arithmetic work scales as O(b^2 h).
ATTENTION_SITES = ("attn_logits", "attn_softmax")

BASE_METRICS = (
    "triple_mults",
    "public_mults",
    "triples_consumed",
    "opened_elements",
    "measured_bytes",
    "measured_rounds",
    "mult_rounds",
    "softmax_batches",
)


def nonarith_key(kind: NonArithKind) -> str:
    return f"nonarith.{NonArithKind(kind).value}"


def calls_key(kind: NonArithKind) -> str:
    return f"calls.{NonArithKind(kind).value}"


class Counters:
    """Monotone counters keyed by (stage, site, metric).

    The current stage and site are ambient state set with the ``stage`` and
    ``site`` context managers; every ``add`` lands in the innermost pair.
    """

    def __init__(self, stage: str = "prefill", site: str = "other"):
        self._data: dict[tuple[str, str], Counter] = defaultdict(Counter)
        self.current_stage = stage
        self.current_site = site

    def add(self, metric: str, n: int = 1) -> None:
        if n < 0:
            raise ValueError("counters never decrease")
        if n:
            self._data[(self.current_stage, self.current_site)][metric] += int(n)

    @contextmanager
    def stage(self, name: str):
        prev, self.current_stage = self.current_stage, name
        try:
            yield self
        finally:
            self.current_stage = prev

    @contextmanager
    def site(self, name: str):
        prev, self.current_site = self.current_site, name
        try:
            yield self
        finally:
            self.current_site = prev

    def get(self, metric: str, stage: str | None = None, sites=None) -> int:
        total = 0
        for (st, si), c in self._data.items():
            if stage is not None and st != stage:
                continue
            if sites is not None and si not in sites:
                continue
            total += c.get(metric, 0)
        return total

    def snapshot(self) -> dict[str, dict[str, dict[str, int]]]:
        out: dict[str, dict[str, dict[str, int]]] = {}
        for (st, si), c in sorted(self._data.items()):
            out.setdefault(st, {})[si] = dict(sorted(c.items()))
        return out


def opened_elements_matmul(backend: str | None, x_size: int, y_size: int, out_size: int) -> int:
    """Ring elements put on the wire (summed over parties) by one private matmul."""
    if backend == "dealer2pc":
        # each party sends its share of X - A and Y - B to the other
        return 2 * (x_size + y_size)
    if backend == "rep3pc":
        # each party reshares its masked cross-term sum once
        return 3 * out_size
    return 0


def opened_elements_mul(backend: str | None, size: int) -> int:
    if backend == "dealer2pc":
        return 2 * 2 * size
    if backend == "rep3pc":
        return 3 * size
    return 0
