"""Sparse mixture-of-experts layer: routing, capacity, dispatch, aux losses.

Each token is scored by a linear router, dispatched to its top-K experts,
and recombined as a gate-weighted sum of expert outputs. Experts enforce a
hard per-group capacity; assignments beyond it are dropped in position
order, and dropped assignments contribute nothing to the combined output.
Two auxiliary losses keep routing healthy: a load-balance term pushing
dispatch fractions toward uniform through the differentiable router
probabilities, and a z-loss shrinking router logit magnitudes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Array,
    Tensor,
    gather_rows,
    logsumexp,
    matmul,
    mean_,
    mul,
    reshape,
    scatter_rows_add,
    silu,
    softmax,
    sum_,
    take_along_last_axis,
    topk_indices,
)

DROP_POLICIES = ("position_priority",)


@dataclass(frozen=True)
class RouterConfig:
    """Routing hyper-parameters for one MoE layer."""

    num_experts: int
    top_k: int = 2
    capacity_factor: float = 1.25
    drop_policy: str = "position_priority"

    def __post_init__(self) -> None:
        if self.num_experts < 1:
            raise ConfigError(f"num_experts must be positive, got {self.num_experts}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(
                f"top_k must be in [1, num_experts]: got K={self.top_k}, E={self.num_experts}"
            )
        if self.capacity_factor <= 0:
            raise ConfigError(f"capacity_factor must be positive, got {self.capacity_factor}")
        if self.drop_policy not in DROP_POLICIES:
            raise ConfigError(f"unknown drop_policy {self.drop_policy!r}")

    def capacity(self, group_tokens: int) -> int:
        """Per-expert capacity C for a routing group of `group_tokens` tokens.

        C = ceil(capacity_factor * B * K / E), never below K. The 1e-9 slack
        keeps exact integer products from rounding up on float noise.
        """
        raw = self.capacity_factor * group_tokens * self.top_k / self.num_experts
        return max(self.top_k, math.ceil(raw - 1e-9))


@dataclass
class RouterOutput:
    """Per-token routing decisions for one group."""

    probs: Tensor  # (B, E) softmax of router logits, differentiable
    logits: Tensor  # (B, E) raw router logits
    topk_idx: Array  # (B, K) selected experts, gate-descending
    gate_vals: Tensor  # (B, K) probabilities of the selected experts
    kept: Array  # (B, K) False where capacity dropped the assignment
    capacity: int


@dataclass
class BalanceLossTerms:
    """Auxiliary loss pieces produced by one MoE forward pass."""

    m: Array  # (E,) fraction of pre-drop assignments per expert; sums to K
    p_mean: Array  # (E,) batch-mean router probability; sums to 1
    balance: Tensor  # scalar load-balance loss, minimum 1 at uniform routing
    z_router: Tensor  # scalar router z-loss


@dataclass(frozen=True)
class TraceRow:
    """One token's routing decision at one layer."""

    seq_id: int
    position: int
    token_id: int
    domain: str
    layer: int
    experts: tuple[int, ...]  # rank-ordered selected experts
    kept: tuple[bool, ...]


@dataclass
class TokenMeta:
    """Identity of the tokens in a routing group, for trace emission."""

    seq_ids: Array
    positions: Array
    token_ids: Array
    domains: Sequence[str]


@dataclass
class SwiGluParams:
    """Gated FFN weights: out = W_out(swish(x W_gate) * (x W_up))."""

    w_gate: Tensor  # (D, F)
    w_up: Tensor  # (D, F)
    w_out: Tensor  # (F, D)


def swiglu(params: SwiGluParams, x: Tensor) -> Tensor:
    gate = silu(matmul(x, params.w_gate))
    return matmul(mul(gate, matmul(x, params.w_up)), params.w_out)


def apply_capacity(topk_idx: Array, cfg: RouterConfig) -> Array:
    """Keep flags for each (token, choice) assignment under expert capacity.

    Assignments are scanned in ascending token position, and within a token
    in choice-rank order; one is kept iff its expert still has room.
    """
    group_tokens, top_k = topk_idx.shape
    cap = cfg.capacity(group_tokens)
    flat = topk_idx.reshape(-1)
    kept = np.zeros(flat.shape[0], dtype=bool)
    for expert in range(cfg.num_experts):
        hits = flat == expert
        kept |= hits & (np.cumsum(hits) <= cap)
    return kept.reshape(group_tokens, top_k)


def route(x: Tensor, router_weights: Tensor, cfg: RouterConfig) -> RouterOutput:
    """Score tokens, pick top-K experts per token, and apply capacity.

    Gate values are the raw top-K softmax probabilities; no renormalization
    over the surviving K entries. Ties break toward the lower expert index.
    """
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"route: expected (B, D) input with B >= 1, got {x.shape}")
    if router_weights.shape != (x.shape[1], cfg.num_experts):
        raise ShapeError(
            f"route: router weights {router_weights.shape} do not match "
            f"D={x.shape[1]}, E={cfg.num_experts}"
        )
    logits = matmul(x, router_weights)
    probs = softmax(logits)
    topk_idx = topk_indices(probs, cfg.top_k)
    gate_vals = take_along_last_axis(probs, topk_idx)
    kept = apply_capacity(topk_idx, cfg)
    return RouterOutput(
        probs=probs,
        logits=logits,
        topk_idx=topk_idx,
        gate_vals=gate_vals,
        kept=kept,
        capacity=cfg.capacity(x.shape[0]),
    )


def dispatch_fractions(topk_idx: Array, num_experts: int) -> Array:
    """m_i: fraction of pre-drop top-K assignments landing on each expert."""
    counts = np.bincount(topk_idx.reshape(-1), minlength=num_experts)
    return counts.astype(np.float64) / topk_idx.shape[0]


def balance_loss(probs: Tensor, topk_idx: Array, top_k: int) -> Tensor:
    """Load-balance loss (E / K) * sum_i m_i * P_i.

    m counts pre-drop assignments and is held constant; gradients flow only
    through the batch-mean probabilities P. The 1/K scaling puts the
    balanced-routing minimum at exactly 1 for any K.
    """
    num_experts = probs.shape[-1]
    m = dispatch_fractions(topk_idx, num_experts)
    p_mean = mean_(probs, axis=0)
    scale = num_experts / top_k
    return mul(sum_(mul(p_mean, Tensor(m))), Tensor(scale))


def router_z_loss(logits: Tensor) -> Tensor:
    """Mean squared log-sum-exp of router logits over the group."""
    z = logsumexp(logits)
    return mean_(mul(z, z))


def _default_meta(group_tokens: int) -> TokenMeta:
    return TokenMeta(
        seq_ids=np.zeros(group_tokens, dtype=np.int64),
        positions=np.arange(group_tokens, dtype=np.int64),
        token_ids=np.full(group_tokens, -1, dtype=np.int64),
        domains=[""] * group_tokens,
    )


def moe_forward(
    x: Tensor,
    experts: Sequence[SwiGluParams],
    router_weights: Tensor,
    cfg: RouterConfig,
    meta: TokenMeta | None = None,
    layer: int = 0,
) -> tuple[Tensor, BalanceLossTerms, list[TraceRow]]:
    """Route a group of tokens through the experts and recombine.

    y[t] = sum over kept choices j of gate[t, j] * expert_{idx[t, j]}(x[t]);
    a token whose every assignment was dropped contributes a zero row.
    """
    if len(experts) != cfg.num_experts:
        raise ShapeError(
            f"moe_forward: got {len(experts)} expert parameter sets for E={cfg.num_experts}"
        )
    group_tokens, width = x.shape
    for i, p in enumerate(experts):
        if p.w_gate.shape[0] != width or p.w_out.shape[1] != width:
            raise ShapeError(
                f"moe_forward: expert {i} width {p.w_gate.shape[0]}x{p.w_out.shape[1]} "
                f"does not match input width {width}"
            )

    out = route(x, router_weights, cfg)
    kept_per_expert = np.bincount(
        out.topk_idx.reshape(-1)[out.kept.reshape(-1)], minlength=cfg.num_experts
    )
    assert kept_per_expert.max(initial=0) <= out.capacity, "capacity violated"

    # Each expert evaluates a fixed-size zero-padded buffer (the classic
    # capacity-slot layout). A constant shape keeps BLAS kernel selection,
    # and therefore every row's bit pattern, independent of how many tokens
    # the expert actually received; zero rows pass through the bias-free
    # SwiGLU as exact zeros. An expert can hold at most min(C, B) tokens.
    slots = min(out.capacity, group_tokens)
    gates_flat = reshape(out.gate_vals, (group_tokens * cfg.top_k,))
    y = Tensor(np.zeros((group_tokens, width)))
    for expert_id in range(cfg.num_experts):
        rows, ranks = np.nonzero((out.topk_idx == expert_id) & out.kept)
        if rows.size == 0:
            continue
        buffer = scatter_rows_add(gather_rows(x, rows), np.arange(rows.size), slots)
        expert_out = gather_rows(swiglu(experts[expert_id], buffer), np.arange(rows.size))
        gate = reshape(gather_rows(gates_flat, rows * cfg.top_k + ranks), (rows.size, 1))
        y = y + scatter_rows_add(mul(expert_out, gate), rows, group_tokens)

    aux = BalanceLossTerms(
        m=dispatch_fractions(out.topk_idx, cfg.num_experts),
        p_mean=out.probs.data.mean(axis=0),
        balance=balance_loss(out.probs, out.topk_idx, cfg.top_k),
        z_router=router_z_loss(out.logits),
    )

    if meta is None:
        meta = _default_meta(group_tokens)
    trace = [
        TraceRow(
            seq_id=int(meta.seq_ids[t]),
            position=int(meta.positions[t]),
            token_id=int(meta.token_ids[t]),
            domain=meta.domains[t],
            layer=layer,
            experts=tuple(int(e) for e in out.topk_idx[t]),
            kept=tuple(bool(k) for k in out.kept[t]),
        )
        for t in range(group_tokens)
    ]
    return y, aux, trace
