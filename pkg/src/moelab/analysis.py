"""Routing-decision analysis over recorded traces.

A trace is the append-only record of per-token routing decisions (sequence,
position, token id, domain, layer, rank-ordered experts, kept flags). The
analyses here reduce it to per-group expert-usage ratios, routing-decision
standard deviations, top-token tables, drop-by-position curves, and
cross-checkpoint routing overlap, plus corpus-level tokenizer statistics.

Attribution is kept-top-1 by default: a token counts toward the expert of
its highest-ranked surviving assignment. Pass include_dropped=True to count
first choices regardless of capacity.
"""

from __future__ import annotations

import csv
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .data import ByteTokenizer, Corpus
from .errors import ConfigError, ContractError
from .model import BatchMeta, ModelConfig, ModelParams, model_forward
from .moe import TraceRow


@dataclass
class RoutingTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def extend(self, rows: Iterable[TraceRow]) -> None:
        self.rows.extend(rows)

    @property
    def num_ranks(self) -> int:
        if not self.rows:
            raise ContractError("empty trace")
        return len(self.rows[0].experts)

    def layers(self) -> list[int]:
        return sorted({r.layer for r in self.rows})

    def for_layer(self, layer: int) -> list[TraceRow]:
        return [r for r in self.rows if r.layer == layer]


def write_trace_csv(trace: RoutingTrace, path: str | Path) -> None:
    ranks = trace.num_ranks
    header = ["seq_id", "position", "token_id", "domain", "layer"]
    for j in range(ranks):
        header += [f"rank{j}_expert", f"rank{j}_kept"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in trace.rows:
            row = [r.seq_id, r.position, r.token_id, r.domain, r.layer]
            for e, k in zip(r.experts, r.kept):
                row += [e, int(k)]
            writer.writerow(row)


def read_trace_csv(path: str | Path) -> RoutingTrace:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:5] != ["seq_id", "position", "token_id", "domain", "layer"]:
            raise ConfigError(f"{path}: not a routing trace csv")
        ranks = (len(header) - 5) // 2
        rows = []
        for line in reader:
            experts = tuple(int(line[5 + 2 * j]) for j in range(ranks))
            kept = tuple(bool(int(line[6 + 2 * j])) for j in range(ranks))
            rows.append(
                TraceRow(
                    seq_id=int(line[0]),
                    position=int(line[1]),
                    token_id=int(line[2]),
                    domain=line[3],
                    layer=int(line[4]),
                    experts=experts,
                    kept=kept,
                )
            )
    return RoutingTrace(rows=rows)


# ---------------------------------------------------------------------------
# specialization ratios


GroupKey = Callable[[TraceRow], object]


@dataclass
class SpecializationReport:
    group_by: str
    layer: int
    num_experts: int
    # group key -> (ratio vector over experts, support count)
    entries: dict[object, tuple[np.ndarray, int]]

    def sorted_items(self):
        return sorted(self.entries.items(), key=lambda kv: str(kv[0]))


def _top1_attribution(row: TraceRow, include_dropped: bool) -> int | None:
    if include_dropped:
        return row.experts[0]
    for expert, kept in zip(row.experts, row.kept):
        if kept:
            return expert
    return None


def expert_ratios(
    trace: RoutingTrace,
    group_by: str,
    layer: int,
    num_experts: int,
    include_dropped: bool = False,
    language_of: Callable[[int], str | None] | None = None,
) -> SpecializationReport:
    """Per-group distribution of tokens over experts.

    `group_by` is one of domain, token_id, position_id, language. The
    language grouping needs `language_of` mapping token ids to a language
    key (None excludes the token). Groups whose every token was dropped are
    omitted with a warning.
    """
    keys: dict[str, GroupKey] = {
        "domain": lambda r: r.domain,
        "token_id": lambda r: r.token_id,
        "position_id": lambda r: r.position,
    }
    if group_by == "language":
        if language_of is None:
            raise ConfigError("language grouping needs a language_of mapping")
        key_fn: GroupKey = lambda r: language_of(r.token_id)
    elif group_by in keys:
        key_fn = keys[group_by]
    else:
        raise ConfigError(f"unknown group_by {group_by!r}")

    rows = trace.for_layer(layer)
    if not rows:
        raise ContractError(f"trace has no rows for layer {layer}")
    counts: dict[object, np.ndarray] = defaultdict(lambda: np.zeros(num_experts))
    for row in rows:
        key = key_fn(row)
        if key is None:
            continue
        expert = _top1_attribution(row, include_dropped)
        if expert is None:
            counts[key] += 0.0  # register the group even if this token was dropped
            continue
        counts[key][expert] += 1.0

    entries: dict[object, tuple[np.ndarray, int]] = {}
    for key, vec in counts.items():
        support = int(vec.sum())
        if support == 0:
            warnings.warn(f"group {key!r} has no kept assignments; omitted")
            continue
        entries[key] = (vec / support, support)
    return SpecializationReport(
        group_by=group_by, layer=layer, num_experts=num_experts, entries=entries
    )


def routing_std(
    report: SpecializationReport, min_support: int = 128
) -> list[tuple[object, float]]:
    """Population standard deviation of each group's expert-ratio vector,
    for groups with at least `min_support` tokens."""
    out = []
    for key, (ratios, support) in report.sorted_items():
        if support < min_support:
            continue
        out.append((key, float(np.std(ratios))))
    return out


def top_tokens(
    trace: RoutingTrace, expert_id: int, n: int = 10, layer: int | None = None
) -> list[tuple[int, int]]:
    """Most frequent token ids among kept assignments to one expert.

    Sorted by count descending, ties by token id ascending.
    """
    counts: Counter = Counter()
    for row in trace.rows:
        if layer is not None and row.layer != layer:
            continue
        for expert, kept in zip(row.experts, row.kept):
            if kept and expert == expert_id:
                counts[row.token_id] += 1
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ordered[:n]


# ---------------------------------------------------------------------------
# drop curves and overlap


@dataclass
class DropBucket:
    start: int
    end: int
    total: int
    dropped: int

    @property
    def ratio(self) -> float:
        return self.dropped / self.total if self.total else 0.0


def drop_curve(trace: RoutingTrace, bucket_size: int = 1) -> dict[str, list[DropBucket]]:
    """Dropped / total assignments per position bucket, per domain tag."""
    if bucket_size < 1:
        raise ConfigError("bucket_size must be positive")
    totals: dict[str, Counter] = defaultdict(Counter)
    drops: dict[str, Counter] = defaultdict(Counter)
    for row in trace.rows:
        bucket = row.position // bucket_size
        totals[row.domain][bucket] += len(row.kept)
        drops[row.domain][bucket] += sum(1 for k in row.kept if not k)
    curves: dict[str, list[DropBucket]] = {}
    for domain, buckets in totals.items():
        curve = []
        for bucket in sorted(buckets):
            curve.append(
                DropBucket(
                    start=bucket * bucket_size,
                    end=(bucket + 1) * bucket_size,
                    total=buckets[bucket],
                    dropped=drops[domain][bucket],
                )
            )
        curves[domain] = curve
    return curves


def argmax_expert_by_token(
    trace: RoutingTrace, num_experts: int, min_support: int = 1
) -> dict[int, int]:
    """Most frequent kept-top-1 expert per token id; ties to the lower id."""
    counts: dict[int, np.ndarray] = defaultdict(lambda: np.zeros(num_experts))
    for row in trace.rows:
        expert = _top1_attribution(row, include_dropped=False)
        if expert is not None:
            counts[row.token_id][expert] += 1
    return {
        token: int(vec.argmax())
        for token, vec in counts.items()
        if vec.sum() >= min_support
    }


def routing_overlap(
    trace_a: RoutingTrace,
    trace_b: RoutingTrace,
    num_experts: int,
    min_support: int = 1,
) -> float:
    """Fraction of token ids routed to the same argmax expert in both traces."""
    map_a = argmax_expert_by_token(trace_a, num_experts, min_support)
    map_b = argmax_expert_by_token(trace_b, num_experts, min_support)
    shared = sorted(set(map_a) & set(map_b))
    if not shared:
        raise ContractError("traces share no token ids at the requested support")
    same = sum(1 for t in shared if map_a[t] == map_b[t])
    return same / len(shared)


def corpus_token_stats(corpus: Corpus, tokenizer: ByteTokenizer) -> tuple[int, int]:
    """(total token count, distinct token ids) over a whole corpus."""
    total = 0
    seen: set[int] = set()
    for doc in corpus.docs:
        ids = tokenizer.tokenize(doc)
        total += len(ids)
        seen.update(ids)
    return total, len(seen)


# ---------------------------------------------------------------------------
# trace capture


def default_trace_layer(cfg: ModelConfig) -> int:
    """The third MoE layer when the model has one, else the last MoE layer."""
    moe_layers = cfg.moe_layer_indices()
    if not moe_layers:
        raise ConfigError("model has no MoE layers")
    return moe_layers[2] if len(moe_layers) >= 3 else moe_layers[-1]


def capture_trace(
    params: ModelParams,
    cfg: ModelConfig,
    tokenizer: ByteTokenizer,
    corpus: Corpus,
    layer: int | None = None,
    seq_len: int | None = None,
    batch_size: int = 1,
    capacity_factor: float | None = None,
    max_sequences: int | None = None,
) -> RoutingTrace:
    """Run the model over a corpus and record routing decisions at one layer.

    Documents are tokenized and cut into non-overlapping windows of
    `seq_len`. Each batch forms one routing group; the default batch size of
    1 keeps drop statistics purely positional. `capacity_factor` overrides
    the trained model's routing capacity at evaluation time.
    """
    if layer is None:
        layer = default_trace_layer(cfg)
    if layer not in cfg.moe_layer_indices():
        raise ConfigError(
            f"layer {layer} is not an MoE layer; valid layers: {cfg.moe_layer_indices()}"
        )
    if capacity_factor is not None:
        cfg = replace(cfg, router=replace(cfg.router, capacity_factor=capacity_factor))
    seq_len = seq_len or cfg.max_seq_len

    sequences: list[list[int]] = []
    for doc in corpus.docs:
        ids = tokenizer.tokenize(doc)
        for start in range(0, len(ids) - 1, seq_len):
            window = ids[start : start + seq_len]
            if len(window) >= 2:
                sequences.append(window)
    if max_sequences is not None:
        sequences = sequences[:max_sequences]
    if not sequences:
        raise ConfigError(f"corpus {corpus.domain_tag!r} yields no sequences")

    trace = RoutingTrace()
    for begin in range(0, len(sequences), batch_size):
        chunk = sequences[begin : begin + batch_size]
        width = max(len(s) for s in chunk)
        ids = np.zeros((len(chunk), width), dtype=np.int64)
        for b, s in enumerate(chunk):
            ids[b, : len(s)] = s
        meta = BatchMeta(
            seq_ids=np.arange(begin, begin + len(chunk), dtype=np.int64),
            domains=[corpus.domain_tag] * len(chunk),
        )
        out = model_forward(params, cfg, ids, meta=meta)
        trace.extend(row for row in out.trace if row.layer == layer)
    return trace


# ---------------------------------------------------------------------------
# report serialization and charts


def write_ratios_csv(report: SpecializationReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["group", "support"] + [f"e{i}" for i in range(report.num_experts)]
        )
        for key, (ratios, support) in report.sorted_items():
            writer.writerow([key, support] + [repr(float(v)) for v in ratios])


def write_std_csv(stds: list[tuple[object, float]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "std"])
        for key, value in stds:
            writer.writerow([key, repr(value)])


def write_top_tokens_csv(
    rows: list[tuple[int, int]], path: str | Path, expert_id: int, tokenizer: ByteTokenizer | None
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["expert", "rank", "token_id", "count", "token"])
        for rank, (token, count) in enumerate(rows):
            rendered = tokenizer.render_token(token) if tokenizer else ""
            writer.writerow([expert_id, rank, token, count, rendered])


def write_drop_curve_csv(curves: dict[str, list[DropBucket]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain", "bucket_start", "bucket_end", "total", "dropped", "ratio"])
        for domain in sorted(curves):
            for b in curves[domain]:
                writer.writerow([domain, b.start, b.end, b.total, b.dropped, repr(b.ratio)])


def _matplotlib():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_ratios_svg(report: SpecializationReport, path: str | Path, max_groups: int = 12) -> None:
    """Bar chart of expert-usage ratios, one panel per group."""
    plt = _matplotlib()
    items = report.sorted_items()[:max_groups]
    fig, axes = plt.subplots(len(items), 1, figsize=(8, 1.6 * len(items)), squeeze=False)
    x = np.arange(report.num_experts)
    for ax, (key, (ratios, support)) in zip(axes[:, 0], items):
        ax.bar(x, ratios)
        ax.set_ylabel("ratio")
        ax.set_title(f"{report.group_by}={key} (n={support})", fontsize=8)
        ax.set_xticks(x, [f"E{i}" for i in x], fontsize=6)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def render_drop_curves_svg(curves: dict[str, list[DropBucket]], path: str | Path) -> None:
    plt = _matplotlib()
    fig, ax = plt.subplots(figsize=(8, 4))
    for domain in sorted(curves):
        curve = curves[domain]
        ax.plot([b.start for b in curve], [b.ratio for b in curve], label=domain)
    ax.set_xlabel("position")
    ax.set_ylabel("drop ratio")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def render_std_svg(stds: list[tuple[object, float]], path: str | Path) -> None:
    plt = _matplotlib()
    fig, ax = plt.subplots(figsize=(8, 4))
    values = [v for _, v in stds]
    ax.plot(range(len(values)), values, marker=".", linestyle="none")
    ax.set_xlabel("group (sorted)")
    ax.set_ylabel("routing decision std")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
