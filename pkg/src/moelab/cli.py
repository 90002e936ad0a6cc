"""Command-line interface: corpus generation, training, trace capture, analysis.

Exit codes: 0 success, 2 configuration errors, 3 runtime errors, 4 numeric
failures. Environment overrides: MOELAB_OUT_DIR replaces the training
output directory, MOELAB_THREADS caps the BLAS thread pools.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, MoelabError, NumericError

_THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_thread_env() -> None:
    threads = os.environ.get("MOELAB_THREADS")
    if threads:
        for var in _THREAD_ENV_VARS:
            os.environ.setdefault(var, threads)


# ---------------------------------------------------------------------------
# run configuration


_MODEL_KEYS = {
    "hidden", "ffn_hidden", "heads", "head_dim", "layers", "vocab", "moe_every",
    "max_seq_len", "router", "w_balance", "w_z_logits", "w_z_router", "rope_base",
}
_ROUTER_KEYS = {"num_experts", "top_k", "capacity_factor", "drop_policy"}
_TRAIN_KEYS = {
    "batch_size", "steps", "peak_lr", "warmup_steps", "checkpoint_every", "seed",
    "grad_clip", "adam_beta1", "adam_beta2", "adam_eps",
}
_DATA_KEYS = {"corpora", "mixture", "objectives", "switches", "num_sentinels"}
_OBJECTIVE_KEYS = {"kind", "mean_span", "mask_ratio", "weight", "bidirectional_prefix"}


def _reject_unknown(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _parse_objectives(raw, where: str):
    from .data import DenoiserSpec

    specs = []
    for i, entry in enumerate(raw):
        _reject_unknown(entry, _OBJECTIVE_KEYS, f"{where}[{i}]")
        if "kind" not in entry:
            raise ConfigError(f"{where}[{i}]: missing 'kind'")
        specs.append(
            DenoiserSpec(
                kind=entry["kind"],
                mean_span=float(entry.get("mean_span", 3.0)),
                mask_ratio=float(entry.get("mask_ratio", 0.15)),
                mix_weight=float(entry.get("weight", 1.0)),
                bidirectional_prefix=bool(entry.get("bidirectional_prefix", False)),
            )
        )
    return tuple(specs)


def load_run_config(path: str | Path, base_dir: Path | None = None):
    """Parse and validate a JSON run configuration.

    Unknown keys are rejected; corpus paths must exist. Returns
    (ModelConfig, TrainConfig, data bundle dict).
    """
    from .data import ByteTokenizer, MixtureConfig, MixtureSwitch, load_corpus
    from .model import ModelConfig
    from .moe import RouterConfig
    from .training import TrainConfig

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from err
    _reject_unknown(raw, {"model", "train", "data"}, "config")
    for section in ("model", "train", "data"):
        if section not in raw:
            raise ConfigError(f"config is missing the {section!r} section")

    model_raw = dict(raw["model"])
    _reject_unknown(model_raw, _MODEL_KEYS, "model")
    router_raw = dict(model_raw.pop("router", {}))
    _reject_unknown(router_raw, _ROUTER_KEYS, "model.router")
    if "num_experts" not in router_raw:
        raise ConfigError("model.router.num_experts is required")
    router = RouterConfig(**router_raw)

    data_raw = dict(raw["data"])
    _reject_unknown(data_raw, _DATA_KEYS, "data")
    tokenizer = ByteTokenizer(num_sentinels=int(data_raw.get("num_sentinels", 128)))

    base = base_dir or path.parent
    corpora = {}
    for corpus_path in data_raw.get("corpora", []):
        resolved = Path(corpus_path)
        if not resolved.is_absolute():
            resolved = base / resolved
        if not resolved.exists():
            raise ConfigError(f"corpus file {resolved} does not exist")
        corpus = load_corpus(resolved)
        corpora[corpus.domain_tag] = corpus
    if not corpora:
        raise ConfigError("data.corpora must list at least one corpus file")

    if "mixture" not in data_raw:
        raise ConfigError("data.mixture is required")
    mixture_pairs = tuple((tag, float(r)) for tag, r in data_raw["mixture"])
    switches = []
    for i, sw in enumerate(data_raw.get("switches", [])):
        _reject_unknown(sw, {"step", "mixture", "objectives"}, f"data.switches[{i}]")
        switches.append(
            MixtureSwitch(
                step=int(sw["step"]),
                mixture=tuple((tag, float(r)) for tag, r in sw["mixture"]),
                objectives=_parse_objectives(sw["objectives"], f"data.switches[{i}].objectives"),
            )
        )
    mixture = MixtureConfig(mixture=mixture_pairs, switches=tuple(switches))
    if "objectives" not in data_raw:
        raise ConfigError("data.objectives is required")
    objectives = _parse_objectives(data_raw["objectives"], "data.objectives")

    if "vocab" not in model_raw:
        model_raw["vocab"] = tokenizer.vocab_size
    elif model_raw["vocab"] < tokenizer.vocab_size:
        raise ConfigError(
            f"model.vocab {model_raw['vocab']} is below tokenizer vocab {tokenizer.vocab_size}"
        )
    model_cfg = ModelConfig(router=router, **model_raw)

    train_raw = dict(raw["train"])
    _reject_unknown(train_raw, _TRAIN_KEYS, "train")
    train_cfg = TrainConfig(**train_raw)

    data_bundle = {
        "corpora": corpora,
        "mixture": mixture,
        "objectives": objectives,
        "tokenizer": tokenizer,
    }
    return model_cfg, train_cfg, data_bundle


def effective_config_dict(model_cfg, train_cfg, data_bundle) -> dict:
    """Resolved configuration with every default filled in."""
    import dataclasses

    def spec_dict(s):
        return {
            "kind": s.kind,
            "mean_span": s.mean_span,
            "mask_ratio": s.mask_ratio,
            "weight": s.mix_weight,
            "bidirectional_prefix": s.bidirectional_prefix,
        }

    mixture = data_bundle["mixture"]
    return {
        "model": {
            **{
                k: v
                for k, v in dataclasses.asdict(model_cfg).items()
                if k != "router"
            },
            "router": dataclasses.asdict(model_cfg.router),
        },
        "train": {
            **dataclasses.asdict(train_cfg),
            "warmup_steps": train_cfg.warmup,
        },
        "data": {
            "domains": sorted(data_bundle["corpora"]),
            "mixture": [list(pair) for pair in mixture.mixture],
            "switches": [
                {
                    "step": sw.step,
                    "mixture": [list(pair) for pair in sw.mixture],
                    "objectives": [spec_dict(s) for s in sw.objectives],
                }
                for sw in mixture.switches
            ],
            "objectives": [spec_dict(s) for s in data_bundle["objectives"]],
            "num_sentinels": data_bundle["tokenizer"].num_sentinels,
        },
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_corpus_gen(args) -> int:
    from .data import GENERATORS, save_corpus

    if args.domain not in GENERATORS:
        raise ConfigError(f"unknown domain {args.domain!r}; choose from {sorted(GENERATORS)}")
    if args.docs < 0:
        raise ConfigError("--docs must be non-negative")
    corpus = GENERATORS[args.domain](args.docs, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out)
    print(f"wrote {len(corpus.docs)} documents to {out}")
    return 0


def cmd_train(args) -> int:
    from .data import DataPipeline
    from .model import init_params
    from .training import load_checkpoint, resume_training, train

    out_dir = Path(os.environ.get("MOELAB_OUT_DIR") or args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if "source" not in ckpt.config or "base_dir" not in ckpt.config:
            raise ConfigError(f"{args.resume} carries no embedded config; cannot resume")
        config_path = out_dir / "_resume_config.json"
        config_path.write_text(json.dumps(ckpt.config["source"], indent=2))
        model_cfg, train_cfg, data_bundle = load_run_config(
            config_path, base_dir=Path(ckpt.config["base_dir"])
        )
    else:
        if not args.config:
            raise ConfigError("either --config or --resume is required")
        model_cfg, train_cfg, data_bundle = load_run_config(args.config)

    pipeline = DataPipeline(
        corpora=data_bundle["corpora"],
        mixture=data_bundle["mixture"],
        objectives=data_bundle["objectives"],
        tokenizer=data_bundle["tokenizer"],
        max_seq_len=model_cfg.max_seq_len,
        seed=train_cfg.seed,
    )
    effective = effective_config_dict(model_cfg, train_cfg, data_bundle)
    (out_dir / "effective_config.json").write_text(json.dumps(effective, indent=2) + "\n")

    if args.resume:
        snapshot = ckpt.config
        result = resume_training(ckpt, model_cfg, train_cfg, pipeline, out_dir)
    else:
        source = json.loads(Path(args.config).read_text())
        snapshot = {"source": source, "base_dir": str(Path(args.config).parent.resolve())}
        params = init_params(model_cfg, seed=train_cfg.seed)
        result = train(
            params, model_cfg, train_cfg, pipeline, out_dir, config_snapshot=snapshot
        )
    final = result.metrics[-1]
    print(
        f"finished {final.step} steps: ce={final.loss_ce:.4f} acc={final.acc:.4f} "
        f"drop={final.drop_frac:.4f}; outputs in {out_dir}"
    )
    return 0


def cmd_trace(args) -> int:
    from .analysis import capture_trace, default_trace_layer, write_trace_csv
    from .data import ByteTokenizer, load_corpus
    from .model import ModelConfig, params_from_tensors
    from .moe import RouterConfig
    from .training import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    source = ckpt.config.get("source", {})
    if "model" not in source:
        raise ConfigError(f"{args.checkpoint} carries no model config")
    model_raw = dict(source["model"])
    router = RouterConfig(**model_raw.pop("router"))
    tokenizer = ByteTokenizer(num_sentinels=int(source.get("data", {}).get("num_sentinels", 128)))
    if "vocab" not in model_raw:
        model_raw["vocab"] = tokenizer.vocab_size
    model_cfg = ModelConfig(router=router, **model_raw)
    params = params_from_tensors(model_cfg, ckpt.tensors)

    corpus = load_corpus(args.corpus)
    layer = args.layer if args.layer is not None else default_trace_layer(model_cfg)
    trace = capture_trace(
        params,
        model_cfg,
        tokenizer,
        corpus,
        layer=layer,
        seq_len=args.seq_len,
        batch_size=args.batch_size,
        capacity_factor=args.capacity_factor,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trace_csv(trace, out)
    print(f"wrote {len(trace)} rows (layer {layer}, domain {corpus.domain_tag}) to {out}")
    return 0


def cmd_analyze(args) -> int:
    from . import analysis
    from .data import ByteTokenizer, language_of_token, load_corpus

    report = args.report
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    traces = [analysis.read_trace_csv(p) for p in args.trace or []]

    if report == "token-stats":
        if not args.corpus:
            raise ConfigError("token-stats needs --corpus")
        tokenizer = ByteTokenizer(num_sentinels=args.num_sentinels)
        total, vocab_used = analysis.corpus_token_stats(load_corpus(args.corpus), tokenizer)
        out.write_text(f"num_tokens,vocab_used\n{total},{vocab_used}\n")
        print(f"{total} tokens, {vocab_used} distinct ids -> {out}")
        return 0

    if not traces:
        raise ConfigError(f"report {report!r} needs at least one --trace")
    num_experts = args.num_experts
    if num_experts is None:
        num_experts = 1 + max(e for t in traces for r in t.rows for e in r.experts)

    if report == "overlap":
        if len(traces) != 2:
            raise ConfigError("overlap needs exactly two --trace files")
        value = analysis.routing_overlap(
            traces[0], traces[1], num_experts, min_support=args.min_support
        )
        out.write_text(f"overlap\n{value!r}\n")
        print(f"routing overlap: {value:.4f} -> {out}")
        return 0

    if len(traces) != 1 and report != "drop-curve":
        raise ConfigError(f"report {report!r} takes exactly one --trace")
    trace = traces[0]

    if report == "ratios":
        layer = args.layer if args.layer is not None else trace.layers()[0]
        tokenizer = ByteTokenizer(num_sentinels=args.num_sentinels)
        rep = analysis.expert_ratios(
            trace,
            args.group_by,
            layer=layer,
            num_experts=num_experts,
            include_dropped=args.include_dropped,
            language_of=lambda t: language_of_token(t, tokenizer),
        )
        analysis.write_ratios_csv(rep, out)
        if args.svg:
            analysis.render_ratios_svg(rep, args.svg)
        print(f"{len(rep.entries)} groups -> {out}")
        return 0

    if report == "std":
        layer = args.layer if args.layer is not None else trace.layers()[0]
        rep = analysis.expert_ratios(
            trace, args.group_by, layer=layer, num_experts=num_experts
        )
        stds = analysis.routing_std(rep, min_support=args.min_support)
        analysis.write_std_csv(stds, out)
        if args.svg:
            analysis.render_std_svg(stds, args.svg)
        print(f"{len(stds)} groups above support {args.min_support} -> {out}")
        return 0

    if report == "top-tokens":
        if args.expert is None:
            raise ConfigError("top-tokens needs --expert")
        tokenizer = ByteTokenizer(num_sentinels=args.num_sentinels)
        rows = analysis.top_tokens(trace, args.expert, n=args.top_n)
        analysis.write_top_tokens_csv(rows, out, args.expert, tokenizer)
        print(f"{len(rows)} tokens for expert {args.expert} -> {out}")
        return 0

    if report == "drop-curve":
        merged = analysis.RoutingTrace()
        for t in traces:
            merged.extend(t.rows)
        curves = analysis.drop_curve(merged, bucket_size=args.bucket_size)
        analysis.write_drop_curve_csv(curves, out)
        if args.svg:
            analysis.render_drop_curves_svg(curves, args.svg)
        print(f"{len(curves)} domain curves -> {out}")
        return 0

    raise ConfigError(f"unknown report {report!r}")


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moelab",
        description="Desk-scale mixture-of-experts transformer lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus-gen", help="generate a synthetic corpus file")
    p.add_argument("--domain", required=True, help="text | code | multilingual")
    p.add_argument("--docs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corpus_gen)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("trace", help="capture routing decisions over a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--layer", type=int, default=None,
                   help="model layer index; defaults to the third MoE layer")
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--capacity-factor", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("analyze", help="reduce trace csvs to reports")
    p.add_argument(
        "--report",
        required=True,
        choices=["ratios", "std", "top-tokens", "drop-curve", "overlap", "token-stats"],
    )
    p.add_argument("--trace", action="append", help="trace csv (repeat for overlap)")
    p.add_argument("--corpus", help="corpus file (token-stats)")
    p.add_argument("--out", required=True)
    p.add_argument("--svg", help="optional chart output path")
    p.add_argument("--group-by", default="token_id",
                   choices=["domain", "token_id", "position_id", "language"])
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--expert", type=int, default=None)
    p.add_argument("--top-n", type=int, default=10)
    p.add_argument("--bucket-size", type=int, default=32)
    p.add_argument("--min-support", type=int, default=128)
    p.add_argument("--num-experts", type=int, default=None)
    p.add_argument("--num-sentinels", type=int, default=128)
    p.add_argument("--include-dropped", action="store_true")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    _apply_thread_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 4
    except MoelabError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
