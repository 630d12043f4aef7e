"""Command-line scenario runner.

Subcommands:
    init-model     write a config and random MRLW weights
    simulate       transform, run the secure protocol, write a cost report
    compare        improvement factors between two reports
    analyze-heads  head distance matrices and similarity groupings
    transform      write transformed weights plus a manifest

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import io as mio
from .accounting import ATTENTION_SITES, STAGES
from .approx import ACTIVATION_KINDS, SOFTMAX_KINDS
from .costing import SCHEMA_VERSION, CostError, CostReport, CostTable, improvement
from .model import Model, ModelConfig, ModelError, ideal_functionality
from .protocol import ProtocolConfig, run_protocol
from .similarity import SimilarityError, pairwise_distances, similar_grouping
from .transforms import Partition, TransformError, TransformManifest, apply_manifest, calibration_prompts

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(Exception):
    pass


CONFIG_ERRORS = (ConfigError, ModelError, TransformError, CostError, SimilarityError, mio.WeightFileError, OSError)


def bundled_config_path():
    return resources.files("mpcmin") / "data" / "toy.json"


def dump_json(obj, path=None) -> str:
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


# -- loading -------------------------------------------------------------------


def load_config(args) -> ModelConfig:
    path = args.config or bundled_config_path()
    with open(path) as fh:
        d = json.load(fh)
    if getattr(args, "softmax", None):
        d["softmax"] = args.softmax
    if getattr(args, "act", None):
        d["activation"] = args.act
    return ModelConfig.from_dict(d)


def load_model(args) -> Model:
    cfg = load_config(args)
    if args.weights:
        return mio.load_weights(cfg, args.weights)
    return Model.random(cfg, args.seed)


def read_grouping(spec: str):
    if spec in ("adjacent", "similar"):
        return spec
    if not spec.startswith("file:"):
        raise ConfigError(f"--grouping must be adjacent, similar or file:<path>, got {spec!r}")
    with open(spec[5:]) as fh:
        data = json.load(fh)
    if isinstance(data, dict) and "groupings" in data:
        data = {k: v["permutation"] for k, v in data["groupings"].items()}
    if isinstance(data, dict) and "grouping" in data:
        data = data["grouping"]
    if isinstance(data, list):
        return {"*": [int(x) for x in data]}
    if isinstance(data, dict):
        return {int(k): [int(x) for x in v] for k, v in data.items()}
    raise ConfigError("grouping file must hold a permutation list or a {layer: permutation} object")


def build_manifest(args, model: Model) -> TransformManifest:
    if getattr(args, "manifest", None):
        with open(args.manifest) as fh:
            man = TransformManifest.from_dict(json.load(fh))
        overridden = [f for f in ("freeze", "lora_rank", "head_merge") if getattr(args, f) is not None]
        if overridden:
            raise ConfigError(f"--manifest cannot be combined with {', '.join('--' + f.replace('_', '-') for f in overridden)}")
        return man
    grouping = read_grouping(args.grouping)
    n = model.config.num_layers
    freeze = args.freeze
    if isinstance(grouping, dict) and "*" in grouping:
        p = Partition.parse(freeze, n) if freeze else Partition(n, n)
        grouping = {i: grouping["*"] for i in p.private_ids}
    return TransformManifest(
        freeze=freeze,
        lora_rank=args.lora_rank or 0,
        merge=args.head_merge or 1,
        grouping=grouping,
        seed=args.seed,
    )


def prompt_tokens(args, cfg: ModelConfig) -> list[int]:
    if args.prompt:
        try:
            return [int(t) for t in args.prompt.split(",") if t.strip()]
        except ValueError:
            raise ConfigError(f"bad --prompt {args.prompt!r}") from None
    rng = np.random.default_rng([args.seed, 11])
    length = min(args.prompt_len, cfg.max_seq)
    return rng.integers(0, cfg.vocab, size=length).tolist()


# -- subcommands ---------------------------------------------------------------


def cmd_init_model(args) -> int:
    cfg = load_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = Model.random(cfg, args.seed)
    mio.save_config(cfg, out / "config.json")
    mio.save_weights(model, out / "weights.mrlw")
    print(f"wrote {out / 'config.json'} and {out / 'weights.mrlw'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    model = load_model(args)
    manifest = build_manifest(args, model)
    table = CostTable.load(args.cost_table) if args.cost_table else CostTable()
    table.backend(args.backend)
    prompt = prompt_tokens(args, model.config)
    if args.tokens < 1:
        raise ConfigError("--tokens must be >= 1")
    model, partition, resolved = apply_manifest(model, manifest)

    tokens, transcript = run_protocol(ProtocolConfig(args.backend, partition, args.tokens, args.seed, resolved.to_dict()), model, prompt)
    ideal = ideal_functionality(model, args.tokens, prompt)
    report = CostReport.from_counters(transcript.counters, table, args.backend, scenario=args.scenario or str(partition))
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": {
            "model": model.config.to_dict(),
            "manifest": resolved.to_dict(),
            "backend": args.backend,
            "seed": args.seed,
            "tokens": args.tokens,
            "prompt": prompt,
            "weights": str(args.weights) if args.weights else None,
            "cost_table": table.to_dict(),
        },
        "tokens": tokens,
        "ideal_tokens": ideal,
        "matches_ideal": tokens == ideal,
        "report": report.to_dict(),
        "measured_bytes_by_stage": transcript.bytes_by_stage(),
        "client_public_mults": transcript.client_counters.get("public_mults"),
    }
    text = dump_json(doc, args.report)
    if args.transcript:
        Path(args.transcript).write_text(transcript.to_jsonl())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    if not args.report:
        sys.stdout.write(text)
    else:
        print(f"tokens {tokens} (ideal match: {tokens == ideal}); report written to {args.report}")
    if tokens != ideal:
        print("error: protocol output differs from the ideal functionality", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _read_report(path) -> CostReport:
    with open(path) as fh:
        d = json.load(fh)
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {d.get('schema_version')!r}")
    return CostReport.from_dict(d["report"] if "report" in d else d)


def cmd_compare(args) -> int:
    base, var = _read_report(args.baseline), _read_report(args.variant)
    f = improvement(base, var)
    doc = f.to_dict()
    doc["attention_nonarith_ratio"] = {
        st: _ratio_or_str(base.site_sum(st, "modeled_nonarith_bytes", ATTENTION_SITES), var.site_sum(st, "modeled_nonarith_bytes", ATTENTION_SITES))
        for st in base.stages
    }
    if args.out:
        dump_json(doc, args.out)
    metrics = args.metrics.split(",")
    print(f"{'stage':<8} " + " ".join(f"{m:>22}" for m in metrics))
    for st in [s for s in STAGES if s in base.stages] + ["total"]:
        cells = []
        for m in metrics:
            r = f.ratios[st].get(m)
            cells.append(f"{'-' if r is None else f'{r:.4f}x':>22}")
        print(f"{st:<8} " + " ".join(cells))
    return EXIT_OK


def _ratio_or_str(a, b):
    if b == 0:
        return 1.0 if a == 0 else "inf"
    return a / b


def cmd_analyze_heads(args) -> int:
    model = load_model(args)
    cfg = model.config
    h = cfg.heads
    if h % args.head_merge:
        raise ConfigError(f"--head-merge {args.head_merge} does not divide {h} heads")
    prompts = calibration_prompts(cfg, args.prompts, args.prompt_len, args.seed)
    dms = pairwise_distances(model, prompts)
    groupings = {}
    for dm in dms:
        g = similar_grouping(dm.values, args.head_merge, seed=args.seed + dm.layer)
        groupings[str(dm.layer)] = {**g.to_dict(), "within_cost": round(g.within_cost(dm.values), 12)}
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": {"model": cfg.to_dict(), "seed": args.seed, "prompts": prompts, "m": args.head_merge},
        "distances": [dm.to_dict() for dm in dms],
        "groupings": groupings,
    }
    text = dump_json(doc, args.out)
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_transform(args) -> int:
    model = load_model(args)
    manifest = build_manifest(args, model)
    model, partition, resolved = apply_manifest(model, manifest)
    resolved.applied = True
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mio.save_config(model.config, out / "config.json")
    mio.save_weights(model, out / "weights.mrlw")
    dump_json(resolved.to_dict(), out / "manifest.json")
    print(f"wrote transformed model ({partition} private) to {out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _model_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="model config JSON (default: bundled toy config)")
    p.add_argument("--weights", help="MRLW weight file (default: random weights from --seed)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--softmax", choices=SOFTMAX_KINDS)
    p.add_argument("--act", choices=ACTIVATION_KINDS)


def _transform_args(p: argparse.ArgumentParser):
    p.add_argument("--manifest", help="transform manifest JSON")
    p.add_argument("--freeze", help="private layers as t/N")
    p.add_argument("--lora-rank", type=int)
    p.add_argument("--head-merge", type=int)
    p.add_argument("--grouping", default="adjacent", help="adjacent | similar | file:<path>")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mpcmin", description="Secure transformer inference simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="write a config and random weights")
    _model_args(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("simulate", help="run the secure protocol and report costs")
    _model_args(p)
    _transform_args(p)
    p.add_argument("--backend", choices=("dealer2pc", "rep3pc"), default="dealer2pc")
    p.add_argument("--tokens", type=int, default=1)
    p.add_argument("--prompt", help="comma-separated token ids")
    p.add_argument("--prompt-len", type=int, default=8)
    p.add_argument("--cost-table")
    p.add_argument("--report", help="report JSON path (default: stdout)")
    p.add_argument("--transcript", help="write the message log as JSON lines")
    p.add_argument("--csv", help="write the cost report as CSV")
    p.add_argument("--scenario", help="scenario id stored in the report")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="improvement factors baseline/variant")
    p.add_argument("baseline")
    p.add_argument("variant")
    p.add_argument("--out")
    p.add_argument("--metrics", default="modeled_bytes,modeled_rounds,triple_mults,nonarith.SoftmaxExp")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("analyze-heads", help="head distances and similarity groupings")
    _model_args(p)
    p.add_argument("--head-merge", type=int, default=2)
    p.add_argument("--prompts", type=int, default=4)
    p.add_argument("--prompt-len", type=int, default=8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze_heads)

    p = sub.add_parser("transform", help="write a transformed model and its manifest")
    _model_args(p)
    _transform_args(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_transform)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CONFIG_ERRORS as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as e:
        print(f"config error: bad JSON: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
