"""Attention blocks: rotated full self-attention, the two garment
cross-attention paths, and their composition into a transformer block.

The two cross-attention paths have deliberately different semantics:

* the semantic path attends to its two token streams (image statistics
  and caption tokens) *independently* and sums the results;
* the detail path concatenates the garment and line streams along the
  sequence axis and runs a *single* joint softmax over both, with a
  zero-initialized low-rank adapter on the concatenated key/value
  features.

Every forward has a hand-written backward; caches are plain tuples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .conditioning import GarmentCondition
from .rope import PositionGrid, RopeFrequencies, apply_rope
from .tensor_ops import (
    gelu,
    gelu_backward,
    layer_norm_backward,
    layer_norm_forward,
    softmax,
    softmax_backward,
)

Array = np.ndarray
Grads = Dict[str, Array]


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class AttentionWeights:
    """Self-attention projections; ``w_o`` maps head space back to channels."""

    w_q: Array
    w_k: Array
    w_v: Array
    w_o: Array
    heads: int
    head_dim: int

    @classmethod
    def create(cls, channels: int, heads: int, head_dim: int, rng: np.random.Generator):
        if channels != heads * head_dim:
            raise ValueError(
                f"self-attention needs channels == heads*head_dim, got {channels} vs {heads}*{head_dim}"
            )
        inner = heads * head_dim
        scale = 1.0 / np.sqrt(channels)
        mk = lambda rows, cols, s: (rng.standard_normal((rows, cols)) * s).astype(np.float32)
        return cls(
            w_q=mk(channels, inner, scale),
            w_k=mk(channels, inner, scale),
            w_v=mk(channels, inner, scale),
            w_o=mk(inner, channels, 1.0 / np.sqrt(inner)),
            heads=heads,
            head_dim=head_dim,
        )


@dataclass
class DualStreamWeights:
    """Cross-attention projections: one shared query, per-stream keys/values.

    Stream ``a`` is the image-derived stream (semantic path: image
    statistics tokens; detail path: garment tokens), stream ``b`` the
    companion (caption tokens / line tokens). No output projection; the
    residual connection around the block absorbs it.
    """

    w_q: Array
    w_k_a: Array
    w_v_a: Array
    w_k_b: Array
    w_v_b: Array
    heads: int
    head_dim: int

    @classmethod
    def create(cls, channels: int, kv_channels: int, heads: int, head_dim: int, rng: np.random.Generator):
        inner = heads * head_dim
        mk = lambda rows, s: (rng.standard_normal((rows, inner)) * s).astype(np.float32)
        sq = 1.0 / np.sqrt(channels)
        sk = 1.0 / np.sqrt(kv_channels)
        return cls(
            w_q=mk(channels, sq),
            w_k_a=mk(kv_channels, sk),
            w_v_a=mk(kv_channels, sk),
            w_k_b=mk(kv_channels, sk),
            w_v_b=mk(kv_channels, sk),
            heads=heads,
            head_dim=head_dim,
        )


@dataclass
class Adapter:
    """Low-rank residual transform ``x + (x @ down) @ up``.

    ``up`` is zero at construction, so a fresh adapter is exactly the
    identity and the surrounding module behaves as if it were absent.
    """

    down: Array
    up: Array

    @classmethod
    def create(cls, channels: int, rank: int, rng: np.random.Generator):
        if rank < 1:
            raise ValueError(f"adapter rank must be >= 1, got {rank}")
        down = (rng.standard_normal((channels, rank)) / np.sqrt(channels)).astype(np.float32)
        up = np.zeros((rank, channels), dtype=np.float32)
        return cls(down=down, up=up)


@dataclass
class BlockParams:
    """One transformer block: self-attention, both cross-attention paths
    in parallel, and a GELU feed-forward, each behind a pre-norm residual."""

    norm1_gain: Array
    norm1_bias: Array
    attn: AttentionWeights
    norm2_gain: Array
    norm2_bias: Array
    semantic: DualStreamWeights
    detail: DualStreamWeights
    adapter: Adapter
    norm3_gain: Array
    norm3_bias: Array
    ffn_w1: Array
    ffn_b1: Array
    ffn_w2: Array
    ffn_b2: Array

    @classmethod
    def create(
        cls,
        channels: int,
        heads: int,
        head_dim: int,
        rng: np.random.Generator,
        ffn_ratio: int = 4,
        adapter_rank: int = 4,
    ):
        hidden = ffn_ratio * channels
        ones = lambda: np.ones(channels, dtype=np.float32)
        zeros = lambda: np.zeros(channels, dtype=np.float32)
        return cls(
            norm1_gain=ones(),
            norm1_bias=zeros(),
            attn=AttentionWeights.create(channels, heads, head_dim, rng),
            norm2_gain=ones(),
            norm2_bias=zeros(),
            semantic=DualStreamWeights.create(channels, channels, heads, head_dim, rng),
            detail=DualStreamWeights.create(channels, channels, heads, head_dim, rng),
            adapter=Adapter.create(heads * head_dim, adapter_rank, rng),
            norm3_gain=ones(),
            norm3_bias=zeros(),
            ffn_w1=(rng.standard_normal((channels, hidden)) / np.sqrt(channels)).astype(np.float32),
            ffn_b1=np.zeros(hidden, dtype=np.float32),
            ffn_w2=(rng.standard_normal((hidden, channels)) / np.sqrt(hidden)).astype(np.float32),
            ffn_b2=zeros(),
        )


# ---------------------------------------------------------------------------
# scaled dot-product attention


def _sdpa_forward(q: Array, k: Array, v: Array):
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query/key dim mismatch: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key/value count mismatch: {k.shape[-2]} vs {v.shape[-2]}")
    if k.shape[-2] == 0:
        raise ValueError("attention over zero keys is undefined")
    scale = 1.0 / np.sqrt(q.shape[-1])
    logits = (q @ np.swapaxes(k, -1, -2)) * scale
    probs = softmax(logits, axis=-1)
    out = probs @ v
    return out, (q, k, v, probs, scale)


def _sdpa_backward(grad_out: Array, cache):
    q, k, v, probs, scale = cache
    d_v = np.swapaxes(probs, -1, -2) @ grad_out
    d_probs = grad_out @ np.swapaxes(v, -1, -2)
    d_logits = softmax_backward(d_probs, probs, axis=-1)
    d_q = (d_logits @ k) * scale
    d_k = (np.swapaxes(d_logits, -1, -2) @ q) * scale
    return d_q, d_k, d_v


def scaled_dot_attention(q: Array, k: Array, v: Array) -> Array:
    """``softmax(q k^T / sqrt(d)) v`` with leading batch axes allowed.

    Every output row is a convex combination of the rows of ``v``.
    """
    out, _ = _sdpa_forward(np.asarray(q), np.asarray(k), np.asarray(v))
    return out


# ---------------------------------------------------------------------------
# full self-attention with rotary positions


def _split_heads(x: Array, heads: int, head_dim: int) -> Array:
    return x.reshape(x.shape[0], heads, head_dim)


def _merge_heads(x: Array) -> Array:
    return x.reshape(x.shape[0], -1)


def full_self_attention_forward(
    seq: Array, grid: PositionGrid, freqs: RopeFrequencies, w: AttentionWeights
):
    if seq.shape[0] != grid.sequence_length:
        raise ValueError(
            f"sequence length {seq.shape[0]} does not match grid length {grid.sequence_length}"
        )
    q = _split_heads(seq @ w.w_q, w.heads, w.head_dim)
    k = _split_heads(seq @ w.w_k, w.heads, w.head_dim)
    v = _split_heads(seq @ w.w_v, w.heads, w.head_dim)
    q_rot = apply_rope(q, grid, freqs)
    k_rot = apply_rope(k, grid, freqs)
    # [heads, L, head_dim] for the batched attention
    out_h, sdpa_cache = _sdpa_forward(
        q_rot.transpose(1, 0, 2), k_rot.transpose(1, 0, 2), v.transpose(1, 0, 2)
    )
    merged = _merge_heads(out_h.transpose(1, 0, 2))
    out = merged @ w.w_o
    cache = (seq, grid, freqs, w, sdpa_cache, merged)
    return out, cache


def full_self_attention_backward(grad_out: Array, cache) -> Tuple[Array, Grads]:
    seq, grid, freqs, w, sdpa_cache, merged = cache
    d_merged = grad_out @ w.w_o.T
    d_w_o = merged.T @ grad_out
    d_out_h = _split_heads(d_merged, w.heads, w.head_dim).transpose(1, 0, 2)
    d_q_rot, d_k_rot, d_v_h = _sdpa_backward(d_out_h, sdpa_cache)
    d_q = apply_rope(d_q_rot.transpose(1, 0, 2), grid, freqs, inverse=True)
    d_k = apply_rope(d_k_rot.transpose(1, 0, 2), grid, freqs, inverse=True)
    d_v = d_v_h.transpose(1, 0, 2)
    d_q_flat = _merge_heads(d_q)
    d_k_flat = _merge_heads(d_k)
    d_v_flat = _merge_heads(d_v)
    d_seq = d_q_flat @ w.w_q.T + d_k_flat @ w.w_k.T + d_v_flat @ w.w_v.T
    grads = {
        "w_q": seq.T @ d_q_flat,
        "w_k": seq.T @ d_k_flat,
        "w_v": seq.T @ d_v_flat,
        "w_o": d_w_o,
    }
    return d_seq, grads


def full_self_attention(
    seq: Array, grid: PositionGrid, freqs: RopeFrequencies, w: AttentionWeights
) -> Array:
    """Rotary self-attention over the garment-extended token grid.

    Queries and keys are rotated before the dot product; values are not.
    """
    out, _ = full_self_attention_forward(np.asarray(seq), grid, freqs, w)
    return out


# ---------------------------------------------------------------------------
# semantic path: decoupled attention over two streams, summed


def _empty(tokens: Array | None) -> bool:
    return tokens is None or tokens.shape[0] == 0


def semantic_cross_attention_forward(
    seq: Array, clip_tokens: Array, txt_tokens: Array, w: DualStreamWeights
):
    if _empty(clip_tokens) and _empty(txt_tokens):
        raise ValueError("semantic cross-attention needs at least one nonempty stream")
    q = _split_heads(seq @ w.w_q, w.heads, w.head_dim).transpose(1, 0, 2)
    out = np.zeros_like(seq)
    caches = {}
    for name, tokens, w_k, w_v in (
        ("a", clip_tokens, w.w_k_a, w.w_v_a),
        ("b", txt_tokens, w.w_k_b, w.w_v_b),
    ):
        if _empty(tokens):
            caches[name] = None
            continue
        k = _split_heads(tokens @ w_k, w.heads, w.head_dim).transpose(1, 0, 2)
        v = _split_heads(tokens @ w_v, w.heads, w.head_dim).transpose(1, 0, 2)
        term, sdpa_cache = _sdpa_forward(q, k, v)
        out = out + _merge_heads(term.transpose(1, 0, 2))
        caches[name] = (tokens, sdpa_cache)
    return out, (seq, w, caches)


def semantic_cross_attention_backward(grad_out: Array, cache) -> Tuple[Array, Grads]:
    seq, w, caches = cache
    d_q_h = None
    grads = {
        "w_q": np.zeros_like(w.w_q),
        "w_k_a": np.zeros_like(w.w_k_a),
        "w_v_a": np.zeros_like(w.w_v_a),
        "w_k_b": np.zeros_like(w.w_k_b),
        "w_v_b": np.zeros_like(w.w_v_b),
    }
    g_h = _split_heads(grad_out, w.heads, w.head_dim).transpose(1, 0, 2)
    for name in ("a", "b"):
        if caches[name] is None:
            continue
        tokens, sdpa_cache = caches[name]
        d_q_term, d_k, d_v = _sdpa_backward(g_h, sdpa_cache)
        d_q_h = d_q_term if d_q_h is None else d_q_h + d_q_term
        d_k_flat = _merge_heads(d_k.transpose(1, 0, 2))
        d_v_flat = _merge_heads(d_v.transpose(1, 0, 2))
        grads[f"w_k_{name}"] += tokens.T @ d_k_flat
        grads[f"w_v_{name}"] += tokens.T @ d_v_flat
    d_q_flat = _merge_heads(d_q_h.transpose(1, 0, 2))
    grads["w_q"] = seq.T @ d_q_flat
    d_seq = d_q_flat @ w.w_q.T
    return d_seq, grads


def semantic_cross_attention(
    seq: Array, clip_tokens: Array, txt_tokens: Array, w: DualStreamWeights
) -> Array:
    """Sum of two independent cross-attentions, one per semantic stream.

    An empty stream contributes zero; at least one stream must be
    nonempty.
    """
    out, _ = semantic_cross_attention_forward(np.asarray(seq), clip_tokens, txt_tokens, w)
    return out


# ---------------------------------------------------------------------------
# detail path: joint softmax over concatenated garment + line streams


def _adapter_forward(x: Array, adapter: Adapter):
    mid = x @ adapter.down
    return x + mid @ adapter.up, mid


def _adapter_backward(grad_out: Array, x: Array, mid: Array, adapter: Adapter):
    d_up = mid.T @ grad_out
    d_mid = grad_out @ adapter.up.T
    d_down = x.T @ d_mid
    d_x = grad_out + d_mid @ adapter.down.T
    return d_x, d_down, d_up


def garment_cross_attention_forward(
    seq: Array,
    garment_tokens: Array,
    line_tokens: Array,
    w: DualStreamWeights,
    adapter: Adapter,
):
    if _empty(garment_tokens) and _empty(line_tokens):
        raise ValueError("detail cross-attention needs at least one nonempty stream")
    garment_tokens = np.zeros((0, w.w_k_a.shape[0]), dtype=seq.dtype) if _empty(garment_tokens) else garment_tokens
    line_tokens = np.zeros((0, w.w_k_b.shape[0]), dtype=seq.dtype) if _empty(line_tokens) else line_tokens

    q = _split_heads(seq @ w.w_q, w.heads, w.head_dim).transpose(1, 0, 2)
    # keys/values of both streams concatenated along the sequence axis,
    # then the adapter's residual low-rank transform
    k_flat = np.concatenate([garment_tokens @ w.w_k_a, line_tokens @ w.w_k_b], axis=0)
    v_flat = np.concatenate([garment_tokens @ w.w_v_a, line_tokens @ w.w_v_b], axis=0)
    k_adj, k_mid = _adapter_forward(k_flat, adapter)
    v_adj, v_mid = _adapter_forward(v_flat, adapter)
    k = _split_heads(k_adj, w.heads, w.head_dim).transpose(1, 0, 2)
    v = _split_heads(v_adj, w.heads, w.head_dim).transpose(1, 0, 2)
    out_h, sdpa_cache = _sdpa_forward(q, k, v)
    out = _merge_heads(out_h.transpose(1, 0, 2))
    cache = (seq, garment_tokens, line_tokens, w, adapter, k_flat, v_flat, k_mid, v_mid, sdpa_cache)
    return out, cache


def garment_cross_attention_backward(grad_out: Array, cache):
    (seq, garment_tokens, line_tokens, w, adapter,
     k_flat, v_flat, k_mid, v_mid, sdpa_cache) = cache
    n_a = garment_tokens.shape[0]
    g_h = _split_heads(grad_out, w.heads, w.head_dim).transpose(1, 0, 2)
    d_q_h, d_k_h, d_v_h = _sdpa_backward(g_h, sdpa_cache)
    d_k_adj = _merge_heads(d_k_h.transpose(1, 0, 2))
    d_v_adj = _merge_heads(d_v_h.transpose(1, 0, 2))
    d_k_flat, d_down_k, d_up_k = _adapter_backward(d_k_adj, k_flat, k_mid, adapter)
    d_v_flat, d_down_v, d_up_v = _adapter_backward(d_v_adj, v_flat, v_mid, adapter)

    d_q_flat = _merge_heads(d_q_h.transpose(1, 0, 2))
    d_seq = d_q_flat @ w.w_q.T
    grads = {
        "w_q": seq.T @ d_q_flat,
        "w_k_a": garment_tokens.T @ d_k_flat[:n_a],
        "w_v_a": garment_tokens.T @ d_v_flat[:n_a],
        "w_k_b": line_tokens.T @ d_k_flat[n_a:],
        "w_v_b": line_tokens.T @ d_v_flat[n_a:],
    }
    adapter_grads = {"down": d_down_k + d_down_v, "up": d_up_k + d_up_v}
    d_garment = d_k_flat[:n_a] @ w.w_k_a.T + d_v_flat[:n_a] @ w.w_v_a.T
    d_line = d_k_flat[n_a:] @ w.w_k_b.T + d_v_flat[n_a:] @ w.w_v_b.T
    return d_seq, grads, adapter_grads, d_garment, d_line


def garment_cross_attention(
    seq: Array,
    garment_tokens: Array,
    line_tokens: Array,
    w: DualStreamWeights,
    adapter: Adapter,
) -> Array:
    """Joint attention over the concatenated garment and line streams.

    One softmax spans both streams' keys, which is not the same as
    attending to each stream separately and summing. With a freshly
    constructed (zero ``up``) adapter, the output is bit-identical to
    the adapter-free computation.
    """
    out, _ = garment_cross_attention_forward(
        np.asarray(seq), garment_tokens, line_tokens, w, adapter
    )
    return out


# ---------------------------------------------------------------------------
# transformer block


def _ffn_forward(x: Array, p: BlockParams):
    pre = x @ p.ffn_w1 + p.ffn_b1
    hidden = gelu(pre)
    out = hidden @ p.ffn_w2 + p.ffn_b2
    return out, (x, pre, hidden)


def _ffn_backward(grad_out: Array, p: BlockParams, cache):
    x, pre, hidden = cache
    d_hidden = grad_out @ p.ffn_w2.T
    d_pre = gelu_backward(d_hidden, pre)
    d_x = d_pre @ p.ffn_w1.T
    grads = {
        "ffn_w1": x.T @ d_pre,
        "ffn_b1": d_pre.sum(axis=0),
        "ffn_w2": hidden.T @ grad_out,
        "ffn_b2": grad_out.sum(axis=0),
    }
    return d_x, grads


def dit_block_forward(
    seq: Array,
    cond: GarmentCondition,
    grid: PositionGrid,
    freqs: RopeFrequencies,
    params: BlockParams,
    t_embed: Array,
):
    n1, n1_cache = layer_norm_forward(seq + t_embed, params.norm1_gain, params.norm1_bias)
    attn_out, attn_cache = full_self_attention_forward(n1, grid, freqs, params.attn)
    x1 = seq + attn_out

    n2, n2_cache = layer_norm_forward(x1, params.norm2_gain, params.norm2_bias)
    sem_out, sem_cache = semantic_cross_attention_forward(
        n2, cond.clip_tokens, cond.txt_tokens, params.semantic
    )
    det_out, det_cache = garment_cross_attention_forward(
        n2, cond.garment_tokens, cond.line_tokens, params.detail, params.adapter
    )
    x2 = x1 + sem_out + det_out

    n3, n3_cache = layer_norm_forward(x2, params.norm3_gain, params.norm3_bias)
    ffn_out, ffn_cache = _ffn_forward(n3, params)
    out = x2 + ffn_out
    cache = (params, n1_cache, attn_cache, n2_cache, sem_cache, det_cache, n3_cache, ffn_cache)
    return out, cache


def dit_block_backward(grad_out: Array, cache):
    """Returns (d_seq, grads, d_garment_tokens, d_line_tokens).

    Grad keys mirror the :class:`BlockParams` field structure with
    dotted prefixes for the nested containers.
    """
    params, n1_cache, attn_cache, n2_cache, sem_cache, det_cache, n3_cache, ffn_cache = cache
    grads: Grads = {}

    d_x2 = grad_out
    d_ffn_in, ffn_grads = _ffn_backward(grad_out, params, ffn_cache)
    d_n3, d_g3, d_b3 = layer_norm_backward(d_ffn_in, n3_cache)
    grads.update(ffn_grads)
    grads["norm3_gain"] = d_g3
    grads["norm3_bias"] = d_b3
    d_x2 = d_x2 + d_n3

    d_sem_in, sem_grads = semantic_cross_attention_backward(d_x2, sem_cache)
    d_det_in, det_grads, adapter_grads, d_garment, d_line = garment_cross_attention_backward(
        d_x2, det_cache
    )
    for k, v in sem_grads.items():
        grads[f"semantic.{k}"] = v
    for k, v in det_grads.items():
        grads[f"detail.{k}"] = v
    for k, v in adapter_grads.items():
        grads[f"adapter.{k}"] = v
    d_n2_total = d_sem_in + d_det_in
    d_x1, d_g2, d_b2 = layer_norm_backward(d_n2_total, n2_cache)
    grads["norm2_gain"] = d_g2
    grads["norm2_bias"] = d_b2
    d_x1 = d_x1 + d_x2

    d_attn_in, attn_grads = full_self_attention_backward(d_x1, attn_cache)
    for k, v in attn_grads.items():
        grads[f"attn.{k}"] = v
    d_n1, d_g1, d_b1 = layer_norm_backward(d_attn_in, n1_cache)
    grads["norm1_gain"] = d_g1
    grads["norm1_bias"] = d_b1
    d_seq = d_x1 + d_n1
    return d_seq, grads, d_garment, d_line


def dit_block(
    seq: Array,
    cond: GarmentCondition,
    grid: PositionGrid,
    freqs: RopeFrequencies,
    params: BlockParams,
    t_embed: Array,
) -> Array:
    """Pre-norm residual block: self-attention, then both cross-attention
    paths in parallel (their outputs summed into the stream), then the
    feed-forward. The timestep embedding is added before the first norm."""
    out, _ = dit_block_forward(np.asarray(seq), cond, grid, freqs, params, t_embed)
    return out
