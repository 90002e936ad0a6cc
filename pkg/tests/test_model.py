"""Transformer model: rotary embedding, blocks, causality, and the total loss."""

import math

import numpy as np
import pytest

from moelab import tensor as T
from moelab.errors import ConfigError, ContractError
from moelab.model import (
    BatchMeta,
    BlockKind,
    ModelConfig,
    attention,
    block_forward,
    causal_mask,
    init_params,
    model_forward,
    rope_apply,
    token_prediction_accuracy,
    total_loss,
)
from moelab.moe import RouterConfig
from helpers import central_difference, rel_err


def micro_config(**overrides):
    defaults = dict(
        hidden=8,
        ffn_hidden=16,
        heads=2,
        head_dim=4,
        layers=2,
        vocab=16,
        moe_every=2,
        max_seq_len=8,
        router=RouterConfig(num_experts=2, top_k=2, capacity_factor=2.0),
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


# ---------------------------------------------------------------------------
# config


def test_config_rejects_head_mismatch():
    with pytest.raises(ConfigError):
        micro_config(heads=3)


def test_config_rejects_odd_head_dim():
    with pytest.raises(ConfigError):
        micro_config(heads=2, head_dim=3, hidden=6)


def test_moe_layer_placement():
    cfg = micro_config(layers=8, moe_every=4, max_seq_len=8)
    assert cfg.moe_layer_indices() == [3, 7]
    assert cfg.block_kind(3) is BlockKind.RESIDUAL_MOE
    assert cfg.block_kind(2) is BlockKind.DENSE


# ---------------------------------------------------------------------------
# rotary embedding


def test_rope_position_zero_is_identity():
    rng = np.random.default_rng(30)
    x = rng.normal(size=(2, 1, 3, 8))
    out = rope_apply(T.Tensor(x), np.array([0]))
    np.testing.assert_array_equal(out.data, x)


def test_rope_preserves_norm():
    rng = np.random.default_rng(31)
    x = rng.normal(size=(1, 5, 2, 8))
    out = rope_apply(T.Tensor(x), np.arange(5) * 7)
    np.testing.assert_allclose(
        np.linalg.norm(out.data, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-12
    )


def test_rope_relative_position_property():
    rng = np.random.default_rng(32)
    q = rng.normal(size=8)
    k = rng.normal(size=8)
    for m, n, shift in [(0, 3, 5), (2, 7, 11), (4, 1, 100)]:
        def rotated(v, pos):
            return rope_apply(T.Tensor(v.reshape(1, 1, 1, 8)), np.array([pos])).data.ravel()

        base = np.dot(rotated(q, m), rotated(k, n))
        shifted = np.dot(rotated(q, m + shift), rotated(k, n + shift))
        assert abs(base - shifted) < 1e-9


def test_rope_rejects_odd_head_dim():
    with pytest.raises(ConfigError):
        rope_apply(T.Tensor(np.zeros((1, 1, 1, 5))), np.array([0]))


def test_rope_gradient_matches_finite_differences():
    rng = np.random.default_rng(33)
    x = rng.normal(size=(1, 3, 2, 4))
    w = rng.normal(size=(1, 3, 2, 4))
    xt = T.Tensor(x, requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_(T.mul(rope_apply(xt, np.arange(3)), T.Tensor(w)))
        tape.backward(loss)

    def forward():
        return float((rope_apply(T.Tensor(x), np.arange(3)).data * w).sum())

    assert rel_err(xt.grad, central_difference(forward, x)) < 1e-4


# ---------------------------------------------------------------------------
# blocks


def test_single_token_attention_is_value_projection():
    rng = np.random.default_rng(34)
    cfg = micro_config()
    params = init_params(cfg, seed=0)
    x = rng.normal(size=(2, 1, 8))
    out = attention(T.Tensor(x), params.blocks[0].attn, cfg, causal_mask(1))
    expected = x @ params.blocks[0].attn.wv.data @ params.blocks[0].attn.wo.data
    np.testing.assert_allclose(out.data, expected, atol=1e-14)


def test_residual_moe_reduces_to_dense_with_zeroed_expert_outputs():
    rng = np.random.default_rng(35)
    cfg = micro_config()
    params = init_params(cfg, seed=1)
    moe_block = params.blocks[1]
    assert moe_block.kind is BlockKind.RESIDUAL_MOE
    for expert in moe_block.experts:
        expert.w_out.data = np.zeros_like(expert.w_out.data)

    x = rng.normal(size=(2, 6, 8))
    mask = causal_mask(6)
    moe_out, _, _ = block_forward(T.Tensor(x), moe_block, cfg, mask, layer=1)

    import dataclasses

    dense_block = dataclasses.replace(moe_block, kind=BlockKind.DENSE)
    dense_out, _, _ = block_forward(T.Tensor(x), dense_block, cfg, mask, layer=1)
    assert (moe_out.data == dense_out.data).all()


def layer_norm_numpy(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def rope_numpy(x, positions, base=10000.0):
    half = x.shape[-1] // 2
    inv_freq = base ** (-np.arange(half) * 2.0 / x.shape[-1])
    angles = np.asarray(positions, dtype=float)[:, None] * inv_freq[None, :]
    cos = np.cos(angles)[None, :, None, :]
    sin = np.sin(angles)[None, :, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = x[..., 0::2] * cos - x[..., 1::2] * sin
    out[..., 1::2] = x[..., 0::2] * sin + x[..., 1::2] * cos
    return out


def swiglu_numpy(p, x):
    pre = x @ p.w_gate.data
    return ((pre / (1.0 + np.exp(-pre))) * (x @ p.w_up.data)) @ p.w_out.data


def test_residual_moe_block_matches_straight_line_computation():
    """Recompute the whole block with plain numpy: norms, rotary attention,
    router softmax, top-k pick, literal capacity scan, gated expert sum."""
    rng = np.random.default_rng(36)
    cfg = micro_config(router=RouterConfig(num_experts=2, top_k=2, capacity_factor=0.8))
    params = init_params(cfg, seed=2)
    block = params.blocks[1]
    batch, seq_len, hidden = 1, 6, 8
    x = rng.normal(size=(batch, seq_len, hidden))

    out, aux, _ = block_forward(T.Tensor(x), block, cfg, causal_mask(seq_len), layer=1)

    # --- attention sublayer ---
    normed = layer_norm_numpy(x, block.ln_att_gain.data, block.ln_att_bias.data)
    q = (normed @ block.attn.wq.data).reshape(batch, seq_len, 2, 4)
    k = (normed @ block.attn.wk.data).reshape(batch, seq_len, 2, 4)
    v = (normed @ block.attn.wv.data).reshape(batch, seq_len, 2, 4)
    q = rope_numpy(q, np.arange(seq_len)).transpose(0, 2, 1, 3)
    k = rope_numpy(k, np.arange(seq_len)).transpose(0, 2, 1, 3)
    v = v.transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(4.0) + causal_mask(seq_len)
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    attn = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, seq_len, hidden)
    h = attn @ block.attn.wo.data + x

    # --- MoE + fixed FFN sublayer ---
    normed2 = layer_norm_numpy(h, block.ln_ffn_gain.data, block.ln_ffn_bias.data)
    flat = normed2.reshape(seq_len, hidden)
    logits = flat @ block.router_weights.data
    shifted = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=-1, keepdims=True)
    topk = np.argsort(-probs, axis=-1, kind="stable")[:, :2]
    cap = cfg.router.capacity(seq_len)
    counts = [0, 0]
    moe_y = np.zeros_like(flat)
    for t in range(seq_len):
        for j in range(2):
            e = int(topk[t, j])
            if counts[e] < cap:
                counts[e] += 1
                moe_y[t] += probs[t, e] * swiglu_numpy(block.experts[e], flat[t])
    expected = moe_y.reshape(batch, seq_len, hidden) + swiglu_numpy(block.ffn, normed2) + h

    np.testing.assert_allclose(out.data, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# causality


def test_causality_exact_zero_upstream():
    cfg = micro_config(vocab=16, max_seq_len=6)
    params = init_params(cfg, seed=3)
    ids = np.arange(6).reshape(1, 6)  # distinct ids so one embedding row = one position
    base = model_forward(params, cfg, ids).logits.data.copy()
    for t in range(1, 6):
        orig = params.embedding.data[t, 0]
        params.embedding.data[t, 0] = orig + 0.37
        bumped = model_forward(params, cfg, ids).logits.data
        params.embedding.data[t, 0] = orig
        assert (bumped[0, :t] == base[0, :t]).all()
        assert (bumped[0, t:] != base[0, t:]).any()


def test_prefix_mask_allows_bidirectional_prefix():
    cfg = micro_config(vocab=16, max_seq_len=6)
    params = init_params(cfg, seed=4)
    ids = np.arange(6).reshape(1, 6)
    base = model_forward(params, cfg, ids, prefix_lens=np.array([4])).logits.data.copy()
    orig = params.embedding.data[2, 0]
    params.embedding.data[2, 0] = orig + 0.37
    bumped = model_forward(params, cfg, ids, prefix_lens=np.array([4])).logits.data
    params.embedding.data[2, 0] = orig
    # inside the prefix, position 0 sees position 2
    assert (bumped[0, 0] != base[0, 0]).any()
    # outside it, causality still holds for later perturbations
    orig = params.embedding.data[5, 0]
    params.embedding.data[5, 0] = orig + 0.37
    bumped = model_forward(params, cfg, ids, prefix_lens=np.array([4])).logits.data
    params.embedding.data[5, 0] = orig
    assert (bumped[0, :5] == base[0, :5]).all()


# ---------------------------------------------------------------------------
# total loss


def test_total_loss_uniform_logits():
    cfg = micro_config(vocab=4, hidden=8)
    logits = T.Tensor(np.zeros((2, 3, 4)))
    targets = np.array([[0, 1, 2], [3, 0, 1]])
    _, parts = total_loss(logits, targets, [], cfg)
    assert abs(parts.ce - math.log(4)) < 1e-12


def test_total_loss_zero_weights_equals_ce():
    rng = np.random.default_rng(37)
    cfg = micro_config(w_balance=0.0, w_z_logits=0.0, w_z_router=0.0)
    params = init_params(cfg, seed=5)
    ids = rng.integers(0, 16, size=(2, 8))
    targets = rng.integers(0, 16, size=(2, 8))
    out = model_forward(params, cfg, ids)
    loss, parts = total_loss(out.logits, targets, out.aux, cfg)
    assert abs(loss.item() - parts.ce) < 1e-15


def test_total_loss_matches_hand_summed_parts():
    rng = np.random.default_rng(38)
    cfg = micro_config()
    params = init_params(cfg, seed=6)
    ids = rng.integers(0, 16, size=(2, 8))
    targets = rng.integers(0, 16, size=(2, 8))
    targets[0, 0] = -100
    out = model_forward(params, cfg, ids)
    loss, parts = total_loss(out.logits, targets, out.aux, cfg)

    flat = out.logits.data.reshape(-1, 16)
    tflat = targets.reshape(-1)
    valid = tflat != -100
    shifted = flat - flat.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    ce = -logp[valid, tflat[valid]].mean()
    lse = np.log(np.exp(shifted).sum(axis=1)) + flat.max(axis=1)
    z_logits = (lse[valid] ** 2).mean()
    balance = np.mean([a.balance.item() for a in out.aux])
    z_router = np.mean([a.z_router.item() for a in out.aux])
    expected = ce + 0.01 * balance + 0.001 * z_logits + 0.0001 * z_router
    assert abs(loss.item() - expected) < 1e-12


def test_total_loss_all_ignored_raises():
    cfg = micro_config(vocab=4)
    with pytest.raises(ContractError):
        total_loss(T.Tensor(np.zeros((1, 2, 4))), np.full((1, 2), -100), [], cfg)


# ---------------------------------------------------------------------------
# accuracy


def test_accuracy_matches_brute_force():
    rng = np.random.default_rng(39)
    logits = rng.normal(size=(3, 5, 7))
    targets = rng.integers(0, 7, size=(3, 5))
    targets[0, 0] = -100
    expected_hits = 0
    expected_total = 0
    for b in range(3):
        for t in range(5):
            if targets[b, t] == -100:
                continue
            expected_total += 1
            if int(np.argmax(logits[b, t])) == targets[b, t]:
                expected_hits += 1
    assert token_prediction_accuracy(logits, targets) == expected_hits / expected_total


# ---------------------------------------------------------------------------
# end-to-end gradients on a tiny model (the full micro check runs in the
# acceptance suite)


def test_end_to_end_gradients_tiny_model():
    rng = np.random.default_rng(40)
    cfg = ModelConfig(
        hidden=4,
        ffn_hidden=6,
        heads=2,
        head_dim=2,
        layers=2,
        vocab=8,
        moe_every=2,
        max_seq_len=4,
        router=RouterConfig(num_experts=2, top_k=1, capacity_factor=1.5),
    )
    params = init_params(cfg, seed=7)
    ids = rng.integers(0, 8, size=(1, 4))
    targets = rng.integers(0, 8, size=(1, 4))

    def loss_value():
        out = model_forward(params, cfg, ids)
        return total_loss(out.logits, targets, out.aux, cfg)[0].item()

    with T.Tape() as tape:
        out = model_forward(params, cfg, ids)
        loss, _ = total_loss(out.logits, targets, out.aux, cfg)
        tape.backward(loss)

    for name, tensor in params.named():
        numeric = central_difference(loss_value, tensor.data)
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        assert rel_err(analytic, numeric) < 1e-4, name


def test_meta_flattening_produces_trace_rows():
    cfg = micro_config()
    params = init_params(cfg, seed=8)
    ids = np.arange(12).reshape(2, 6) % 16
    meta = BatchMeta(seq_ids=np.array([7, 8]), domains=["text", "code"])
    out = model_forward(params, cfg, ids, meta=meta)
    assert len(out.trace) == 12  # one MoE layer, 12 tokens
    row = out.trace[0]
    assert row.seq_id == 7 and row.domain == "text" and row.position == 0
    assert out.trace[6].seq_id == 8 and out.trace[6].domain == "code"
    assert out.trace[7].position == 1
    assert all(r.layer == 1 for r in out.trace)
