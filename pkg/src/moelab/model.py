"""Decoder-only transformer with rotary attention, SwiGLU FFNs, and
interleaved residual-MoE blocks.

Dense blocks are the usual pre-norm pair:

    x = MHA(LN_att(x)) + x
    x = FFN(LN_ffn(x)) + x

Residual-MoE blocks feed the same normalized activation to both a fixed FFN
and the sparse MoE layer, and add both into the stream:

    x = MoE(LN_ffn(x)) + FFN(LN_ffn(x)) + x

so every token keeps one always-on FFN path even when its expert
assignments are dropped. MoE blocks sit at every `moe_every`-th layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .moe import (
    BalanceLossTerms,
    RouterConfig,
    SwiGluParams,
    TokenMeta,
    TraceRow,
    moe_forward,
    swiglu,
)
from .tensor import (
    Array,
    Tensor,
    add,
    cross_entropy_with_logits,
    embedding,
    gather_rows,
    layer_norm,
    logsumexp,
    matmul,
    mul,
    record,
    reshape,
    sum_,
    softmax,
    transpose,
)

IGNORE_INDEX = -100
MASK_VALUE = -1e9  # exp(x + MASK_VALUE) underflows to exactly 0.0 in float64


class BlockKind(Enum):
    DENSE = "dense"
    RESIDUAL_MOE = "residual_moe"


@dataclass(frozen=True)
class ModelConfig:
    hidden: int
    ffn_hidden: int
    heads: int
    head_dim: int
    layers: int
    vocab: int
    moe_every: int
    max_seq_len: int
    router: RouterConfig
    w_balance: float = 0.01
    w_z_logits: float = 0.001
    w_z_router: float = 0.0001
    rope_base: float = 10000.0

    def __post_init__(self) -> None:
        for name in ("hidden", "ffn_hidden", "heads", "head_dim", "layers", "vocab",
                     "moe_every", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.heads * self.head_dim != self.hidden:
            raise ConfigError(
                f"heads * head_dim must equal hidden: "
                f"{self.heads} * {self.head_dim} != {self.hidden}"
            )
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary embedding, got {self.head_dim}")

    def block_kind(self, layer_index: int) -> BlockKind:
        if (layer_index + 1) % self.moe_every == 0:
            return BlockKind.RESIDUAL_MOE
        return BlockKind.DENSE

    def moe_layer_indices(self) -> list[int]:
        return [i for i in range(self.layers) if self.block_kind(i) is BlockKind.RESIDUAL_MOE]


# ---------------------------------------------------------------------------
# parameters


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


@dataclass
class BlockParams:
    kind: BlockKind
    ln_att_gain: Tensor
    ln_att_bias: Tensor
    ln_ffn_gain: Tensor
    ln_ffn_bias: Tensor
    attn: AttentionParams
    ffn: SwiGluParams
    router_weights: Tensor | None = None
    experts: list[SwiGluParams] = field(default_factory=list)


@dataclass
class ModelParams:
    embedding: Tensor
    blocks: list[BlockParams]
    ln_final_gain: Tensor
    ln_final_bias: Tensor
    lm_head: Tensor

    def named(self) -> list[tuple[str, Tensor]]:
        """All trainable tensors in a fixed, checkpoint-stable order."""
        out: list[tuple[str, Tensor]] = [("embedding", self.embedding)]
        for i, block in enumerate(self.blocks):
            prefix = f"block{i}"
            out.append((f"{prefix}.ln_att_gain", block.ln_att_gain))
            out.append((f"{prefix}.ln_att_bias", block.ln_att_bias))
            out.append((f"{prefix}.ln_ffn_gain", block.ln_ffn_gain))
            out.append((f"{prefix}.ln_ffn_bias", block.ln_ffn_bias))
            for name in ("wq", "wk", "wv", "wo"):
                out.append((f"{prefix}.attn.{name}", getattr(block.attn, name)))
            for name in ("w_gate", "w_up", "w_out"):
                out.append((f"{prefix}.ffn.{name}", getattr(block.ffn, name)))
            if block.kind is BlockKind.RESIDUAL_MOE:
                out.append((f"{prefix}.router", block.router_weights))
                for e, expert in enumerate(block.experts):
                    for name in ("w_gate", "w_up", "w_out"):
                        out.append((f"{prefix}.expert{e}.{name}", getattr(expert, name)))
        out.append(("ln_final_gain", self.ln_final_gain))
        out.append(("ln_final_bias", self.ln_final_bias))
        out.append(("lm_head", self.lm_head))
        return out

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named())


def _swiglu_init(rng, width: int, hidden: int, std: float) -> SwiGluParams:
    return SwiGluParams(
        w_gate=Tensor(rng.normal(0.0, std, size=(width, hidden)), requires_grad=True),
        w_up=Tensor(rng.normal(0.0, std, size=(width, hidden)), requires_grad=True),
        w_out=Tensor(rng.normal(0.0, std, size=(hidden, width)), requires_grad=True),
    )


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Fresh parameters: embeddings at std 0.02, projections at
    0.02 / sqrt(layer depth), layer-norm gains at 1."""
    rng = np.random.default_rng(seed)
    hidden = cfg.hidden

    def ln_pair():
        return (
            Tensor(np.ones(hidden), requires_grad=True),
            Tensor(np.zeros(hidden), requires_grad=True),
        )

    blocks = []
    for i in range(cfg.layers):
        std = 0.02 / np.sqrt(i + 1)
        ln_att = ln_pair()
        ln_ffn = ln_pair()
        attn = AttentionParams(
            wq=Tensor(rng.normal(0.0, std, size=(hidden, hidden)), requires_grad=True),
            wk=Tensor(rng.normal(0.0, std, size=(hidden, hidden)), requires_grad=True),
            wv=Tensor(rng.normal(0.0, std, size=(hidden, hidden)), requires_grad=True),
            wo=Tensor(rng.normal(0.0, std, size=(hidden, hidden)), requires_grad=True),
        )
        ffn = _swiglu_init(rng, hidden, cfg.ffn_hidden, std)
        kind = cfg.block_kind(i)
        router = None
        experts: list[SwiGluParams] = []
        if kind is BlockKind.RESIDUAL_MOE:
            router = Tensor(
                rng.normal(0.0, 0.02, size=(hidden, cfg.router.num_experts)),
                requires_grad=True,
            )
            experts = [
                _swiglu_init(rng, hidden, cfg.ffn_hidden, std)
                for _ in range(cfg.router.num_experts)
            ]
        blocks.append(
            BlockParams(
                kind=kind,
                ln_att_gain=ln_att[0],
                ln_att_bias=ln_att[1],
                ln_ffn_gain=ln_ffn[0],
                ln_ffn_bias=ln_ffn[1],
                attn=attn,
                ffn=ffn,
                router_weights=router,
                experts=experts,
            )
        )
    return ModelParams(
        embedding=Tensor(rng.normal(0.0, 0.02, size=(cfg.vocab, hidden)), requires_grad=True),
        blocks=blocks,
        ln_final_gain=Tensor(np.ones(hidden), requires_grad=True),
        ln_final_bias=Tensor(np.zeros(hidden), requires_grad=True),
        lm_head=Tensor(rng.normal(0.0, 0.02, size=(hidden, cfg.vocab)), requires_grad=True),
    )


def params_from_tensors(cfg: ModelConfig, tensors: dict[str, Array]) -> ModelParams:
    """Rebuild the parameter structure from checkpointed arrays."""
    params = init_params(cfg, seed=0)
    for name, tensor in params.named():
        if name not in tensors:
            raise ConfigError(f"checkpoint is missing parameter {name!r}")
        value = tensors[name]
        if value.shape != tensor.data.shape:
            raise ConfigError(
                f"checkpoint parameter {name!r} has shape {value.shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data = value.astype(np.float64).copy()
    return params


# ---------------------------------------------------------------------------
# rotary position embedding


def rope_apply(x: Tensor, positions: Array, base: float = 10000.0) -> Tensor:
    """Rotate adjacent feature pairs of q/k by position-dependent angles.

    `x` is (B, T, heads, head_dim) and `positions` is (T,). Pair 2i rotates
    by positions * base^(-2i / head_dim); position 0 is the identity.
    """
    head_dim = x.shape[-1]
    if head_dim % 2 != 0:
        raise ConfigError(f"rope_apply: head_dim must be even, got {head_dim}")
    positions = np.asarray(positions, dtype=np.float64)
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half) * 2.0 / head_dim)
    angles = positions[:, None] * inv_freq[None, :]  # (T, half)
    cos = np.cos(angles)[None, :, None, :]
    sin = np.sin(angles)[None, :, None, :]

    def rotate(values: Array, c: Array, s: Array) -> Array:
        even = values[..., 0::2]
        odd = values[..., 1::2]
        out = np.empty_like(values)
        out[..., 0::2] = even * c - odd * s
        out[..., 1::2] = even * s + odd * c
        return out

    out_data = rotate(x.data, cos, sin)
    # the rotation is orthogonal, so the vjp rotates by the opposite angle
    return record(out_data, [(x, lambda g: rotate(g, cos, -sin))])


# ---------------------------------------------------------------------------
# attention and blocks


def causal_mask(seq_len: int) -> Array:
    """(T, T) additive mask: 0 where key position <= query position."""
    i = np.arange(seq_len)
    return np.where(i[None, :] <= i[:, None], 0.0, MASK_VALUE)


def prefix_causal_mask(seq_len: int, prefix_lens: Array) -> Array:
    """(B, 1, T, T) additive mask: causal, plus full visibility inside each
    sequence's prefix."""
    i = np.arange(seq_len)
    causal = i[None, :] <= i[:, None]
    masks = np.empty((len(prefix_lens), 1, seq_len, seq_len))
    for b, p in enumerate(prefix_lens):
        inside = (i[:, None] < p) & (i[None, :] < p)
        masks[b, 0] = np.where(causal | inside, 0.0, MASK_VALUE)
    return masks


def attention(x: Tensor, p: AttentionParams, cfg: ModelConfig, mask: Array) -> Tensor:
    batch, seq_len, hidden = x.shape
    positions = np.arange(seq_len)

    def heads(t: Tensor) -> Tensor:
        return reshape(t, (batch, seq_len, cfg.heads, cfg.head_dim))

    q = rope_apply(heads(matmul(x, p.wq)), positions, cfg.rope_base)
    k = rope_apply(heads(matmul(x, p.wk)), positions, cfg.rope_base)
    v = heads(matmul(x, p.wv))

    q = transpose(q, (0, 2, 1, 3))  # (B, H, T, d)
    k = transpose(k, (0, 2, 3, 1))  # (B, H, d, T)
    v = transpose(v, (0, 2, 1, 3))

    scores = mul(matmul(q, k), Tensor(1.0 / np.sqrt(cfg.head_dim)))
    weights = softmax(add(scores, Tensor(mask)))
    mixed = transpose(matmul(weights, v), (0, 2, 1, 3))
    return matmul(reshape(mixed, (batch, seq_len, hidden)), p.wo)


def block_forward(
    x: Tensor,
    block: BlockParams,
    cfg: ModelConfig,
    mask: Array,
    layer: int = 0,
    meta: TokenMeta | None = None,
) -> tuple[Tensor, BalanceLossTerms | None, list[TraceRow]]:
    """One transformer block; residual-MoE blocks add MoE and FFN outputs
    computed from the same normalized input."""
    batch, seq_len, hidden = x.shape
    normed = layer_norm(x, block.ln_att_gain, block.ln_att_bias)
    x = add(attention(normed, block.attn, cfg, mask), x)

    normed = layer_norm(x, block.ln_ffn_gain, block.ln_ffn_bias)
    if block.kind is BlockKind.DENSE:
        return add(swiglu(block.ffn, normed), x), None, []

    flat = reshape(normed, (batch * seq_len, hidden))
    moe_out, aux, trace = moe_forward(
        flat, block.experts, block.router_weights, cfg.router, meta=meta, layer=layer
    )
    moe_out = reshape(moe_out, (batch, seq_len, hidden))
    return add(add(moe_out, swiglu(block.ffn, normed)), x), aux, trace


# ---------------------------------------------------------------------------
# full model


@dataclass
class BatchMeta:
    """Token identity for trace emission, aligned with an (B, T) input batch."""

    seq_ids: Array  # (B,)
    domains: Sequence[str]  # length B


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, T, V)
    aux: list[BalanceLossTerms]
    trace: list[TraceRow]


def _flatten_meta(meta: BatchMeta, input_ids: Array) -> TokenMeta:
    batch, seq_len = input_ids.shape
    return TokenMeta(
        seq_ids=np.repeat(np.asarray(meta.seq_ids, dtype=np.int64), seq_len),
        positions=np.tile(np.arange(seq_len, dtype=np.int64), batch),
        token_ids=input_ids.reshape(-1).astype(np.int64),
        domains=[d for d in meta.domains for _ in range(seq_len)],
    )


def model_forward(
    params: ModelParams,
    cfg: ModelConfig,
    input_ids: Array,
    meta: BatchMeta | None = None,
    prefix_lens: Array | None = None,
) -> ForwardOutput:
    """Run the decoder over a batch of token ids.

    `prefix_lens`, when given, makes attention bidirectional within each
    sequence's first `prefix_lens[b]` positions (prefix-LM style); the
    default mask is strictly causal.
    """
    input_ids = np.asarray(input_ids)
    if input_ids.ndim != 2:
        raise ShapeError(f"model_forward: expected (B, T) input ids, got {input_ids.shape}")
    batch, seq_len = input_ids.shape
    if seq_len > cfg.max_seq_len:
        raise ConfigError(
            f"sequence length {seq_len} exceeds max_seq_len {cfg.max_seq_len}"
        )
    if input_ids.min(initial=0) < 0 or input_ids.max(initial=0) >= cfg.vocab:
        raise ConfigError("model_forward: token id out of vocabulary range")

    mask = (
        causal_mask(seq_len)
        if prefix_lens is None
        else prefix_causal_mask(seq_len, np.asarray(prefix_lens))
    )
    token_meta = None
    if meta is not None:
        token_meta = _flatten_meta(meta, input_ids)

    x = embedding(params.embedding, input_ids)
    aux_terms: list[BalanceLossTerms] = []
    trace: list[TraceRow] = []
    for layer, block in enumerate(params.blocks):
        x, aux, rows = block_forward(x, block, cfg, mask, layer=layer, meta=token_meta)
        if aux is not None:
            aux_terms.append(aux)
            trace.extend(rows)
    x = layer_norm(x, params.ln_final_gain, params.ln_final_bias)
    logits = matmul(x, params.lm_head)
    return ForwardOutput(logits=logits, aux=aux_terms, trace=trace)


# ---------------------------------------------------------------------------
# loss and metrics


@dataclass
class LossParts:
    ce: float
    balance: float
    z_router: float
    z_logits: float
    total: float


def _mean_terms(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return mul(total, Tensor(1.0 / len(terms)))


def total_loss(
    logits: Tensor,
    targets: Array,
    aux: Sequence[BalanceLossTerms],
    cfg: ModelConfig,
    ignore_index: int = IGNORE_INDEX,
) -> tuple[Tensor, LossParts]:
    """Cross entropy plus weighted auxiliary terms.

    `targets[b, t]` labels `logits[b, t]`; positions marked `ignore_index`
    are excluded from the cross entropy and from the output z-loss. Balance
    and router z-losses are averaged across MoE layers.
    """
    targets = np.asarray(targets)
    if logits.ndim != 3 or targets.shape != logits.shape[:2]:
        raise ShapeError(
            f"total_loss: logits {logits.shape} and targets {targets.shape} disagree"
        )
    vocab = logits.shape[-1]
    flat_logits = reshape(logits, (-1, vocab))
    flat_targets = targets.reshape(-1)
    ce = cross_entropy_with_logits(flat_logits, flat_targets, ignore_index)

    valid_rows = np.nonzero(flat_targets != ignore_index)[0]
    z = logsumexp(gather_rows(flat_logits, valid_rows))
    z_logits = mul(sum_(mul(z, z)), Tensor(1.0 / valid_rows.size))

    loss = add(ce, mul(z_logits, Tensor(cfg.w_z_logits)))
    balance_mean = 0.0
    z_router_mean = 0.0
    if aux:
        balance = _mean_terms([a.balance for a in aux])
        z_router = _mean_terms([a.z_router for a in aux])
        loss = add(loss, mul(balance, Tensor(cfg.w_balance)))
        loss = add(loss, mul(z_router, Tensor(cfg.w_z_router)))
        balance_mean = balance.item()
        z_router_mean = z_router.item()
    parts = LossParts(
        ce=ce.item(),
        balance=balance_mean,
        z_router=z_router_mean,
        z_logits=z_logits.item(),
        total=loss.item(),
    )
    return loss, parts


def token_prediction_accuracy(
    logits: Array | Tensor, targets: Array, ignore_index: int = IGNORE_INDEX
) -> float:
    """Fraction of non-ignored positions where argmax(logits) equals the target."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    targets = np.asarray(targets)
    valid = targets != ignore_index
    if not valid.any():
        raise ContractError("accuracy: every target position is ignored")
    predictions = data.argmax(axis=-1)
    return float((predictions[valid] == targets[valid]).mean())
