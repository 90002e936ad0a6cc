"""Byte-level tokenizer, synthetic corpora, and training-objective construction.

Targets are position-aligned with inputs: ``target_ids[i]`` is the label
for the token at position ``i`` (to be predicted from everything before
it), with IGNORE_INDEX marking positions excluded from the loss. Position 0
is never predictable, so it is always ignored.

Objectives:

* causal_lm: predict every next token, with a trailing end-of-sequence.
* prefix_lm: split at ceil((1 - r) * len); the prefix is given, the
  suffix is predicted. Attention over the prefix stays causal unless the
  denoiser spec asks for a bidirectional prefix.
* span_corrupt: replace non-overlapping spans with sentinel tokens and
  predict the sequence of (sentinel, original span) pairs after the
  corrupted input. Span lengths are drawn geometric around the mean span
  length and trimmed so the realized mask count is exactly
  round(mask_ratio * len).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DecodeError, SkipExample

IGNORE_INDEX = -100
PAD_ID = 0
EOS_ID = 1


class ByteTokenizer:
    """Reversible byte-level tokenizer with pad/eos/sentinel specials.

    Token id = byte value + number of specials. Specials are pad=0, eos=1,
    and `num_sentinels` span-mask sentinels occupying ids 2 .. 2+S-1.
    """

    def __init__(self, num_sentinels: int = 128) -> None:
        if num_sentinels < 0:
            raise ConfigError("num_sentinels must be non-negative")
        self.num_sentinels = num_sentinels
        self.num_specials = 2 + num_sentinels
        self.vocab_size = self.num_specials + 256

    def tokenize(self, data: bytes | str) -> list[int]:
        if isinstance(data, str):
            data = data.encode("utf-8")
        offset = self.num_specials
        return [offset + b for b in data]

    def detokenize(self, ids: Sequence[int]) -> bytes:
        offset = self.num_specials
        out = bytearray()
        for i in ids:
            if not offset <= i < self.vocab_size:
                raise DecodeError(f"token id {i} is not a byte token")
            out.append(i - offset)
        return bytes(out)

    def sentinel_id(self, j: int) -> int:
        """Id of the j-th sentinel within one example; ids strictly decrease
        with j so successive spans carry successive (descending) sentinels."""
        if not 0 <= j < self.num_sentinels:
            raise ConfigError(f"sentinel index {j} out of range (S={self.num_sentinels})")
        return 2 + self.num_sentinels - 1 - j

    def is_sentinel(self, token_id: int) -> bool:
        return 2 <= token_id < 2 + self.num_sentinels

    def render_token(self, token_id: int) -> str:
        """Printable form for report tables."""
        if token_id == PAD_ID:
            return "<pad>"
        if token_id == EOS_ID:
            return "<eos>"
        if self.is_sentinel(token_id):
            return f"<mask{2 + self.num_sentinels - 1 - token_id}>"
        if self.num_specials <= token_id < self.vocab_size:
            return repr(bytes([token_id - self.num_specials]))[1:]
        return f"<invalid{token_id}>"


# ---------------------------------------------------------------------------
# objectives


@dataclass(frozen=True)
class DenoiserSpec:
    """One component of the training-objective mixture."""

    kind: str  # causal_lm | prefix_lm | span_corrupt
    mean_span: float = 3.0
    mask_ratio: float = 0.15
    mix_weight: float = 1.0
    bidirectional_prefix: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("causal_lm", "prefix_lm", "span_corrupt"):
            raise ConfigError(f"unknown objective kind {self.kind!r}")
        if self.kind == "span_corrupt" and self.mean_span <= 0:
            raise ConfigError("mean_span must be positive")
        if self.kind in ("prefix_lm", "span_corrupt") and not 0 < self.mask_ratio < 1:
            raise ConfigError("mask_ratio must be in (0, 1)")
        if not 0 <= self.mix_weight <= 1:
            raise ConfigError("mix_weight must be in [0, 1]")

    @property
    def tag(self) -> str:
        if self.kind == "span_corrupt":
            return f"span_corrupt_mu{self.mean_span:g}_r{self.mask_ratio:g}"
        if self.kind == "prefix_lm":
            return f"prefix_lm_r{self.mask_ratio:g}"
        return "causal_lm"


# the standard mixture-of-denoisers: half prefix-LM, half span corruption
# across span-length / mask-ratio combinations
UL2_MIX: tuple[DenoiserSpec, ...] = (
    DenoiserSpec("prefix_lm", mask_ratio=0.5, mix_weight=0.5),
    DenoiserSpec("span_corrupt", mean_span=3, mask_ratio=0.15, mix_weight=0.1),
    DenoiserSpec("span_corrupt", mean_span=8, mask_ratio=0.15, mix_weight=0.1),
    DenoiserSpec("span_corrupt", mean_span=3, mask_ratio=0.5, mix_weight=0.1),
    DenoiserSpec("span_corrupt", mean_span=8, mask_ratio=0.5, mix_weight=0.1),
    DenoiserSpec("span_corrupt", mean_span=64, mask_ratio=0.5, mix_weight=0.1),
)

CAUSAL_LM_ONLY: tuple[DenoiserSpec, ...] = (DenoiserSpec("causal_lm", mix_weight=1.0),)


@dataclass
class TrainingExample:
    input_ids: list[int]
    target_ids: list[int]  # aligned with input_ids; IGNORE_INDEX where unsupervised
    domain_tag: str
    objective_tag: str
    prefix_len: int | None = None  # unsupervised head length (prefix / corrupted input)
    bidirectional_prefix: bool = False

    def supervised_positions(self) -> int:
        return sum(1 for t in self.target_ids if t != IGNORE_INDEX)


def causal_lm(tokens: Sequence[int], domain_tag: str = "") -> TrainingExample:
    """Next-token prediction over the sequence plus a trailing eos."""
    if len(tokens) < 1:
        raise SkipExample("causal_lm needs at least one token")
    seq = list(tokens) + [EOS_ID]
    return TrainingExample(
        input_ids=seq,
        target_ids=[IGNORE_INDEX] + seq[1:],
        domain_tag=domain_tag,
        objective_tag="causal_lm",
    )


def prefix_lm(
    tokens: Sequence[int],
    mask_ratio: float = 0.5,
    rng: np.random.Generator | None = None,
    domain_tag: str = "",
    bidirectional: bool = False,
) -> TrainingExample:
    """Keep the first ceil((1 - r) * len) tokens as context, predict the rest.

    The split point is deterministic; `rng` is accepted for interface
    uniformity with the other objectives. At least one prefix token and one
    predicted token always remain.
    """
    del rng
    n = len(tokens)
    if n < 2:
        raise SkipExample("prefix_lm needs at least two tokens")
    prefix = min(max(1, math.ceil((1.0 - mask_ratio) * n)), n - 1)
    targets = [IGNORE_INDEX] * prefix + list(tokens[prefix:])
    return TrainingExample(
        input_ids=list(tokens),
        target_ids=targets,
        domain_tag=domain_tag,
        objective_tag=f"prefix_lm_r{mask_ratio:g}",
        prefix_len=prefix,
        bidirectional_prefix=bidirectional,
    )


def span_corrupt(
    tokens: Sequence[int],
    mean_span: float,
    mask_ratio: float,
    rng: np.random.Generator,
    tokenizer: ByteTokenizer,
    domain_tag: str = "",
) -> TrainingExample:
    """Mask spans of the sequence and predict them after the corrupted input.

    Exactly round(mask_ratio * len) tokens are masked. Span lengths are
    geometric with the requested mean (clamped to half the sequence), spans
    never touch so each earns its own sentinel, and sentinel ids strictly
    decrease over the example. The example is the corrupted input followed
    by (sentinel, span) pairs and a trailing eos, supervised only on the
    target half.
    """
    n = len(tokens)
    if n < 2:
        raise SkipExample("span_corrupt needs at least two tokens")
    if mask_ratio * n < 1:
        raise SkipExample("mask_ratio too small to mask a single token")
    mu = max(1.0, min(float(mean_span), n / 2.0))
    num_mask = min(max(1, round(mask_ratio * n)), n - 1)

    # interior gaps need one separating token each, so the span count is
    # bounded by both the sentinel budget and the unmasked token supply
    max_spans = min(tokenizer.num_sentinels, n - num_mask + 1)
    if max_spans < 1:
        raise SkipExample("no sentinel budget for span corruption")
    lengths: list[int] = []
    remaining = num_mask
    while remaining > 0:
        if len(lengths) == max_spans - 1:
            span = remaining
        else:
            span = min(int(rng.geometric(1.0 / mu)), remaining)
        lengths.append(span)
        remaining -= span
    num_spans = len(lengths)

    # scatter the spans: first and last gaps may be empty, interior gaps >= 1
    spare = (n - num_mask) - (num_spans - 1)
    extra = rng.multinomial(spare, np.full(num_spans + 1, 1.0 / (num_spans + 1)))
    gaps = [int(extra[0])] + [1 + int(e) for e in extra[1:-1]] + [int(extra[-1])]

    corrupted: list[int] = []
    target: list[int] = []
    cursor = 0
    for j, span in enumerate(lengths):
        corrupted.extend(tokens[cursor : cursor + gaps[j]])
        cursor += gaps[j]
        sentinel = tokenizer.sentinel_id(j)
        corrupted.append(sentinel)
        target.append(sentinel)
        target.extend(tokens[cursor : cursor + span])
        cursor += span
    corrupted.extend(tokens[cursor : cursor + gaps[-1]])
    cursor += gaps[-1]
    assert cursor == n
    target.append(EOS_ID)

    input_ids = corrupted + target
    target_ids = [IGNORE_INDEX] * len(corrupted) + target
    return TrainingExample(
        input_ids=input_ids,
        target_ids=target_ids,
        domain_tag=domain_tag,
        objective_tag=f"span_corrupt_mu{mean_span:g}_r{mask_ratio:g}",
        prefix_len=len(corrupted),
    )


def splice_span_targets(
    corrupted: Sequence[int], target: Sequence[int], tokenizer: ByteTokenizer
) -> list[int]:
    """Reconstruct the original sequence from a span-corrupted pair."""
    spans: dict[int, list[int]] = {}
    current: list[int] | None = None
    for t in target:
        if tokenizer.is_sentinel(t):
            current = spans.setdefault(t, [])
        elif t == EOS_ID:
            current = None
        elif current is not None:
            current.append(t)
        else:
            raise ContractError("target does not start with a sentinel")
    out: list[int] = []
    for t in corrupted:
        if tokenizer.is_sentinel(t):
            out.extend(spans.get(t, []))
        else:
            out.append(t)
    return out


def realized_mask_fraction(example: TrainingExample, tokenizer: ByteTokenizer) -> float:
    """Fraction of original tokens hidden behind sentinels."""
    if example.prefix_len is None:
        raise ContractError("not a span-corruption example")
    corrupted = example.input_ids[: example.prefix_len]
    target = example.input_ids[example.prefix_len :]
    masked = sum(
        1 for t in target if not tokenizer.is_sentinel(t) and t != EOS_ID
    )
    original = len(corrupted) - sum(1 for t in corrupted if tokenizer.is_sentinel(t)) + masked
    return masked / original


def make_example(
    spec: DenoiserSpec,
    tokens: Sequence[int],
    max_seq_len: int,
    rng: np.random.Generator,
    tokenizer: ByteTokenizer,
    domain_tag: str = "",
) -> TrainingExample:
    """Apply one denoiser to a token sequence, windowing it to fit."""
    if spec.kind == "causal_lm":
        window = max_seq_len - 1
    elif spec.kind == "prefix_lm":
        window = max_seq_len
    else:
        # corrupted input + targets + eos must fit: n * (1 + 2r) + 1 <= max
        window = int((max_seq_len - 2) / (1.0 + 2.0 * spec.mask_ratio))
    if window < 2:
        raise ConfigError(f"max_seq_len {max_seq_len} too small for {spec.tag}")
    tokens = list(tokens)
    if len(tokens) > window:
        start = int(rng.integers(0, len(tokens) - window + 1))
        tokens = tokens[start : start + window]

    if spec.kind == "causal_lm":
        example = causal_lm(tokens, domain_tag)
    elif spec.kind == "prefix_lm":
        example = prefix_lm(
            tokens, spec.mask_ratio, rng, domain_tag, bidirectional=spec.bidirectional_prefix
        )
    else:
        example = span_corrupt(tokens, spec.mean_span, spec.mask_ratio, rng, tokenizer, domain_tag)
    if len(example.input_ids) > max_seq_len:
        raise SkipExample("example exceeds max_seq_len after construction")
    if example.supervised_positions() < 1:
        raise SkipExample("example has no supervised positions")
    return example


# ---------------------------------------------------------------------------
# corpora


@dataclass
class Corpus:
    domain_tag: str
    docs: list[bytes]


def _escape(doc: bytes) -> str:
    return doc.decode("utf-8").replace("\\", "\\\\").replace("\n", "\\n").replace("\t", "\\t")


def _unescape(line: str) -> bytes:
    out: list[str] = []
    i = 0
    while i < len(line):
        c = line[i]
        if c == "\\" and i + 1 < len(line):
            nxt = line[i + 1]
            if nxt == "n":
                out.append("\n")
                i += 2
                continue
            if nxt == "t":
                out.append("\t")
                i += 2
                continue
            if nxt == "\\":
                out.append("\\")
                i += 2
                continue
        out.append(c)
        i += 1
    return "".join(out).encode("utf-8")


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """One document per line, newlines and tabs backslash-escaped, with a
    `#domain:<tag>` header line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#domain:{corpus.domain_tag}\n")
        for doc in corpus.docs:
            fh.write(_escape(doc) + "\n")


def load_corpus(path: str | Path) -> Corpus:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith("#domain:"):
            raise ConfigError(f"{path}: missing #domain:<tag> header")
        tag = header[len("#domain:") :]
        docs = [_unescape(line.rstrip("\n")) for line in fh if line.strip()]
    return Corpus(domain_tag=tag, docs=docs)


_TEXT_VOCAB_SIZE = 48
_SENTENCE_RANGE = (4, 11)


def _zipf_weights(n: int, exponent: float = 1.3) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def generate_text_corpus(num_docs: int, seed: int) -> Corpus:
    """Zipf-distributed word soup over an invented lowercase lexicon."""
    rng = np.random.default_rng(seed)
    letters = "abcdefghijklmnopqrstuvwxyz"
    words = []
    while len(words) < _TEXT_VOCAB_SIZE:
        w = "".join(rng.choice(list(letters), size=rng.integers(2, 8)))
        if w not in words:
            words.append(w)
    weights = _zipf_weights(len(words))
    docs = []
    for _ in range(num_docs):
        sentences = []
        for _ in range(rng.integers(3, 9)):
            count = rng.integers(*_SENTENCE_RANGE)
            picks = rng.choice(len(words), size=count, p=weights)
            sentences.append(" ".join(words[i] for i in picks) + ".")
        docs.append(" ".join(sentences).encode("utf-8"))
    return Corpus(domain_tag="text", docs=docs)


def generate_code_corpus(num_docs: int, seed: int) -> Corpus:
    """Toy assignment/"function" language, heavy on newline, tab, and '='."""
    rng = np.random.default_rng(seed)
    ops = ["+", "-", "*"]
    docs = []
    for _ in range(num_docs):
        lines = []
        for _ in range(rng.integers(4, 12)):
            form = rng.integers(0, 3)
            a, b, c = rng.integers(0, 10, size=3)
            if form == 0:
                lines.append(f"x{a} = x{b} {rng.choice(ops)} {c}")
            elif form == 1:
                lines.append(
                    f"def f{a}(x{b}):\n\tx{c} = x{b} {rng.choice(ops)} {a}\n\treturn x{c}"
                )
            else:
                lines.append(f"for i in range({a}):\n\tx{b} = x{b} + i")
        docs.append("\n".join(lines).encode("utf-8"))
    return Corpus(domain_tag="code", docs=docs)


# each pseudo-language owns a disjoint run of uppercase letters, so language
# identity is recoverable from token ids alone and the whole domain is
# byte-disjoint from the lowercase text/code corpora
_LANG_ALPHABETS = ["ABCDEF", "GHIJKL", "MNOPQR", "STUVWX"]


def generate_multilingual_corpus(num_docs: int, seed: int, num_languages: int = 4) -> Corpus:
    if not 1 <= num_languages <= len(_LANG_ALPHABETS):
        raise ConfigError(f"num_languages must be in [1, {len(_LANG_ALPHABETS)}]")
    rng = np.random.default_rng(seed)
    docs = []
    for d in range(num_docs):
        alphabet = list(_LANG_ALPHABETS[d % num_languages])
        words = []
        for _ in range(rng.integers(12, 40)):
            words.append("".join(rng.choice(alphabet, size=rng.integers(2, 7))))
        docs.append(" ".join(words).encode("utf-8"))
    return Corpus(domain_tag="multilingual", docs=docs)


def language_of_token(token_id: int, tokenizer: ByteTokenizer) -> str | None:
    """Pseudo-language of a token id, or None for shared/byte-ambiguous ids."""
    byte = token_id - tokenizer.num_specials
    if not 0 <= byte < 256:
        return None
    ch = chr(byte)
    for lang, alphabet in enumerate(_LANG_ALPHABETS):
        if ch in alphabet:
            return f"lang{lang}"
    return None


GENERATORS = {
    "text": generate_text_corpus,
    "code": generate_code_corpus,
    "multilingual": generate_multilingual_corpus,
}


# ---------------------------------------------------------------------------
# mixture sampling


@dataclass(frozen=True)
class MixtureSwitch:
    """At `step`, swap in a new domain mixture and objective mix atomically."""

    step: int
    mixture: tuple[tuple[str, float], ...]
    objectives: tuple[DenoiserSpec, ...]


def _check_ratios(pairs: Sequence[tuple[str, float]], what: str) -> None:
    total = sum(r for _, r in pairs)
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"{what} ratios sum to {total}, expected 1")
    if any(r < 0 for _, r in pairs):
        raise ConfigError(f"{what} ratios must be non-negative")


def _check_weights(specs: Sequence[DenoiserSpec]) -> None:
    total = sum(s.mix_weight for s in specs)
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"objective mix weights sum to {total}, expected 1")


@dataclass(frozen=True)
class MixtureConfig:
    mixture: tuple[tuple[str, float], ...]
    switches: tuple[MixtureSwitch, ...] = ()

    def __post_init__(self) -> None:
        _check_ratios(self.mixture, "domain mixture")
        steps = [s.step for s in self.switches]
        if steps != sorted(steps):
            raise ConfigError("mixture switches must be ordered by step")
        for s in self.switches:
            _check_ratios(s.mixture, f"switch@{s.step} mixture")
            _check_weights(s.objectives)

    def at_step(
        self, step: int, base_objectives: Sequence[DenoiserSpec]
    ) -> tuple[tuple[tuple[str, float], ...], tuple[DenoiserSpec, ...]]:
        mixture = self.mixture
        objectives = tuple(base_objectives)
        for switch in self.switches:
            if step >= switch.step:
                mixture = switch.mixture
                objectives = switch.objectives
        return mixture, objectives


def sample_batch(
    corpora: Mapping[str, Corpus],
    mixture: MixtureConfig,
    objectives: Sequence[DenoiserSpec],
    step: int,
    batch_size: int,
    max_seq_len: int,
    tokenizer: ByteTokenizer,
    rng: np.random.Generator,
) -> list[TrainingExample]:
    """Draw a batch: domains i.i.d. by ratio, objectives by mix weight.

    Switch points in the mixture config replace both distributions at once.
    Documents too short for the drawn objective are retried.
    """
    _check_weights(objectives)
    ratios, objectives = mixture.at_step(step, objectives)
    for tag, _ in ratios:
        if tag not in corpora:
            raise ConfigError(f"mixture references unknown domain {tag!r}")
    tags = [t for t, _ in ratios]
    probs = np.array([r for _, r in ratios])
    obj_probs = np.array([s.mix_weight for s in objectives])

    examples: list[TrainingExample] = []
    while len(examples) < batch_size:
        tag = tags[int(rng.choice(len(tags), p=probs))]
        spec = objectives[int(rng.choice(len(objectives), p=obj_probs))]
        corpus = corpora[tag]
        if not corpus.docs:
            raise ConfigError(f"corpus {tag!r} is empty")
        for _ in range(16):
            doc = corpus.docs[int(rng.integers(0, len(corpus.docs)))]
            tokens = tokenizer.tokenize(doc)
            try:
                examples.append(
                    make_example(spec, tokens, max_seq_len, rng, tokenizer, tag)
                )
                break
            except SkipExample:
                continue
        else:
            raise ConfigError(
                f"corpus {tag!r} has no document usable for objective {spec.tag}"
            )
    return examples


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    input_ids: np.ndarray  # (B, T) int64, padded with PAD_ID
    target_ids: np.ndarray  # (B, T) aligned labels, IGNORE_INDEX where unsupervised
    labels: np.ndarray  # (B, T) next-token labels for logits[b, t]
    seq_ids: np.ndarray  # (B,)
    domains: list[str]
    prefix_lens: np.ndarray | None  # set when any example wants a bidirectional prefix


def collate(examples: Sequence[TrainingExample], first_seq_id: int = 0) -> Batch:
    """Pad examples to a rectangle and derive shifted next-token labels."""
    if not examples:
        raise ContractError("collate: empty batch")
    batch = len(examples)
    width = max(len(e.input_ids) for e in examples)
    input_ids = np.full((batch, width), PAD_ID, dtype=np.int64)
    target_ids = np.full((batch, width), IGNORE_INDEX, dtype=np.int64)
    for b, e in enumerate(examples):
        input_ids[b, : len(e.input_ids)] = e.input_ids
        target_ids[b, : len(e.target_ids)] = e.target_ids
    labels = np.full_like(target_ids, IGNORE_INDEX)
    labels[:, :-1] = target_ids[:, 1:]
    use_prefix = any(e.bidirectional_prefix for e in examples)
    prefix_lens = None
    if use_prefix:
        prefix_lens = np.array(
            [e.prefix_len if (e.bidirectional_prefix and e.prefix_len) else 0 for e in examples],
            dtype=np.int64,
        )
    return Batch(
        input_ids=input_ids,
        target_ids=target_ids,
        labels=labels,
        seq_ids=np.arange(first_seq_id, first_seq_id + batch, dtype=np.int64),
        domains=[e.domain_tag for e in examples],
        prefix_lens=prefix_lens,
    )


@dataclass
class DataPipeline:
    """Deterministic batch source: batch t is a pure function of (seed, t)."""

    corpora: dict[str, Corpus]
    mixture: MixtureConfig
    objectives: tuple[DenoiserSpec, ...]
    tokenizer: ByteTokenizer
    max_seq_len: int
    seed: int

    def batch(self, step: int, batch_size: int) -> Batch:
        rng = np.random.default_rng((self.seed, step))
        examples = sample_batch(
            self.corpora,
            self.mixture,
            self.objectives,
            step,
            batch_size,
            self.max_seq_len,
            self.tokenizer,
            rng,
        )
        return collate(examples, first_seq_id=step * batch_size)
