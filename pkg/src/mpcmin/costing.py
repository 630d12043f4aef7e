"""Cost reports, cost-table modelling and improvement factors.

A ``CostReport`` is an immutable snapshot of engine counters split by stage
(and by site inside each stage).  Two communication columns are kept:
``measured_bytes`` is what the executable backend actually put on its
channels; ``modeled_bytes`` prices each counter with a ``CostTable``:

    modeled_bytes  = sum_k nonarith[k] * bytes_per_element[k]
                   + opened_elements * bytes_per_opened_element
                   + triple_mults * bytes_per_private_mult
    modeled_rounds = sum_k calls[k] * rounds_per_batch[k]
                   + mult_rounds * rounds_per_mult_batch
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .accounting import ATTENTION_SITES, STAGES, Counters, NonArithKind, calls_key, nonarith_key

SCHEMA_VERSION = 1

# Engineering estimates for function-secret-sharing / garbled style
# sub-protocols over 64-bit rings.  Only ratios between scenarios are meant
# to be read off these numbers.
DEFAULT_NONARITH = {
    "Trunc": {"bytes_per_element": 64, "rounds_per_batch": 1},
    "Compare": {"bytes_per_element": 256, "rounds_per_batch": 4},
    "Relu": {"bytes_per_element": 256, "rounds_per_batch": 4},
    "SoftmaxExp": {"bytes_per_element": 1024, "rounds_per_batch": 8},
    "SoftmaxDiv": {"bytes_per_element": 768, "rounds_per_batch": 6},
    "Gelu": {"bytes_per_element": 1024, "rounds_per_batch": 8},
    "Silu": {"bytes_per_element": 1024, "rounds_per_batch": 8},
    "Rsqrt": {"bytes_per_element": 768, "rounds_per_batch": 6},
}
DEFAULT_BACKENDS = {
    "dealer2pc": {"bytes_per_opened_element": 8, "bytes_per_private_mult": 0, "rounds_per_mult_batch": 1},
    "rep3pc": {"bytes_per_opened_element": 8, "bytes_per_private_mult": 0, "rounds_per_mult_batch": 1},
    # not executed: HE/OT-style two-party profile where products dominate
    "plain2pc": {"bytes_per_opened_element": 0, "bytes_per_private_mult": 256, "rounds_per_mult_batch": 2},
}

COUNTER_METRICS = (
    "triple_mults",
    "public_mults",
    "triples_consumed",
    "opened_elements",
    "measured_bytes",
    "measured_rounds",
    "mult_rounds",
    "softmax_batches",
)


class CostError(ValueError):
    pass


@dataclass
class CostTable:
    nonarith: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_NONARITH)))
    backends: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_BACKENDS)))

    def __post_init__(self):
        for kind, entry in self.nonarith.items():
            NonArithKind(kind)
            for key in ("bytes_per_element", "rounds_per_batch"):
                if entry.get(key, 0) < 0:
                    raise CostError(f"negative {key} for {kind}")
        for name, entry in self.backends.items():
            for key, v in entry.items():
                if v < 0:
                    raise CostError(f"negative {key} for backend {name}")

    def kind(self, kind: str) -> dict:
        return self.nonarith.get(kind, {"bytes_per_element": 0, "rounds_per_batch": 0})

    def backend(self, name: str) -> dict:
        if name not in self.backends:
            raise CostError(f"cost table has no profile for backend {name!r}")
        return self.backends[name]

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "nonarith": self.nonarith, "backends": self.backends}

    @classmethod
    def from_dict(cls, d: dict) -> "CostTable":
        base = cls()
        nonarith = {**base.nonarith, **d.get("nonarith", {})}
        backends = {**base.backends, **d.get("backends", {})}
        return cls(nonarith, backends)

    @classmethod
    def load(cls, path) -> "CostTable":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _model(metrics: dict, table: CostTable, profile: str) -> tuple[int | float, int | float, int | float]:
    """(nonarith bytes, arithmetic bytes, rounds) for one bag of counters."""
    prof = table.backend(profile)
    na_bytes = 0
    rounds = 0
    for kind in NonArithKind:
        entry = table.kind(kind.value)
        na_bytes += metrics.get(nonarith_key(kind), 0) * entry["bytes_per_element"]
        rounds += metrics.get(calls_key(kind), 0) * entry["rounds_per_batch"]
    arith = (
        metrics.get("opened_elements", 0) * prof["bytes_per_opened_element"]
        + metrics.get("triple_mults", 0) * prof["bytes_per_private_mult"]
    )
    rounds += metrics.get("mult_rounds", 0) * prof["rounds_per_mult_batch"]
    return na_bytes, arith, rounds


def _add(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = out.get(k, 0) + v
    return out


def _priced(metrics: dict, table: CostTable, profile: str) -> dict:
    na, ar, rounds = _model(metrics, table, profile)
    out = {m: metrics.get(m, 0) for m in COUNTER_METRICS}
    for kind in NonArithKind:
        out[nonarith_key(kind)] = metrics.get(nonarith_key(kind), 0)
        out[calls_key(kind)] = metrics.get(calls_key(kind), 0)
    out["modeled_nonarith_bytes"] = na
    out["modeled_arith_bytes"] = ar
    out["modeled_bytes"] = na + ar
    out["modeled_rounds"] = rounds
    return out


@dataclass(frozen=True)
class CostReport:
    """Per-stage (prefill, decode) metrics plus a per-site breakdown."""

    scenario: str
    profile: str
    stages: dict
    sites: dict

    @classmethod
    def from_counters(
        cls,
        counters: Counters,
        table: CostTable | None = None,
        profile: str = "dealer2pc",
        scenario: str = "run",
        stages=STAGES,
    ) -> "CostReport":
        table = table or CostTable()
        snap = counters.snapshot()
        st_out, si_out = {}, {}
        for st in stages:
            raw_sites = snap.get(st, {})
            si_out[st] = {si: _priced(m, table, profile) for si, m in sorted(raw_sites.items())}
            total: dict = {}
            for m in raw_sites.values():
                total = _add(total, m)
            st_out[st] = _priced(total, table, profile)
        return cls(scenario, profile, st_out, si_out)

    def stage(self, name: str) -> dict:
        if name == "total":
            return self.total
        return self.stages[name]

    @property
    def total(self) -> dict:
        out: dict = {}
        for st in STAGES:
            if st in self.stages:
                out = _add(out, self.stages[st])
        return out

    def site_sum(self, stage: str, metric: str, sites) -> int | float:
        return sum(m.get(metric, 0) for si, m in self.sites.get(stage, {}).items() if si in sites)

    def attention_nonarith_bytes(self, stage: str = "prefill") -> int | float:
        """Modeled non-arithmetic bytes in the O(b^2 h) attention sites."""
        return self.site_sum(stage, "modeled_nonarith_bytes", ATTENTION_SITES)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": self.scenario,
            "profile": self.profile,
            "stages": self.stages,
            "sites": self.sites,
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CostReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise CostError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(d["scenario"], d["profile"], d["stages"], d.get("sites", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "stage", "metric", "value"])
        for st in list(self.stages) + ["total"]:
            for metric, v in sorted(self.stage(st).items()):
                w.writerow([self.scenario, st, metric, v])
        return buf.getvalue()


@dataclass(frozen=True)
class ImprovementFactor:
    baseline: str
    variant: str
    ratios: dict
    # (stage, metric) pairs whose variant value is zero while the baseline is not
    infinite: tuple

    def get(self, stage: str, metric: str) -> float:
        return self.ratios[stage][metric]

    def to_dict(self) -> dict:
        enc = {
            st: {m: ("inf" if math.isinf(v) else v) for m, v in sorted(ms.items())} for st, ms in self.ratios.items()
        }
        return {
            "schema_version": SCHEMA_VERSION,
            "baseline": self.baseline,
            "variant": self.variant,
            "ratios": enc,
            "infinite": [list(p) for p in self.infinite],
        }


def ratio(a, b) -> float:
    if b == 0:
        return 1.0 if a == 0 else math.inf
    return a / b


def improvement(baseline: CostReport, variant: CostReport) -> ImprovementFactor:
    """baseline / variant for every metric of every stage (and the total)."""
    if set(baseline.stages) != set(variant.stages):
        raise CostError(f"stage mismatch: {sorted(baseline.stages)} vs {sorted(variant.stages)}")
    ratios, inf = {}, []
    for st in list(baseline.stages) + ["total"]:
        b, v = baseline.stage(st), variant.stage(st)
        row = {}
        for metric in sorted(set(b) | set(v)):
            r = ratio(b.get(metric, 0), v.get(metric, 0))
            row[metric] = r
            if math.isinf(r):
                inf.append((st, metric))
        ratios[st] = row
    return ImprovementFactor(baseline.scenario, variant.scenario, ratios, tuple(inf))


def nonarith_share(report: CostReport, table: CostTable | None = None, stage: str = "total") -> float:
    """Modeled non-arithmetic bytes over all modeled bytes.

    With ``table`` the report's raw counters are re-priced under it;
    otherwise the report's own modeled columns are used.
    """
    m = report.stage(stage)
    if table is None:
        na, total = m["modeled_nonarith_bytes"], m["modeled_bytes"]
    else:
        na, ar, _ = _model(m, table, report.profile)
        total = na + ar
    return 0.0 if total == 0 else na / total
