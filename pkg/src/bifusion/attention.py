"""Multi-head attention: intra-modal refinement and the cross-modal variant.

The intra-modal layer is a single multi-head self-attention: Q/K/V linear
maps, scaled dot-product attention with masked keys excluded, heads
concatenated through an output projection.  No positional encoding, residual
path or layer norm is applied; rows belonging to masked query positions are
zeroed so padding stays inert downstream.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import (
    ShapeMismatchError,
    Tensor,
    add,
    concat,
    linear,
    matmul,
    mul,
    narrow,
    parameter,
    softmax,
    transpose,
)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def additive_key_mask(mask: Optional[np.ndarray], batch: int, n_keys: int) -> Optional[Tensor]:
    """(B, 1, N_k) tensor with 0 at valid keys and -inf at masked ones."""
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (batch, n_keys):
        raise ShapeMismatchError(f"key mask {mask.shape} != ({batch}, {n_keys})")
    out = np.where(mask, 0.0, -np.inf)[:, None, :]
    return Tensor(out)


def attention_weights(q: Tensor, k: Tensor, d_k: int,
                      key_mask: Optional[Tensor] = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) with masked keys carrying exactly 0 weight.

    ``q`` is (B, N_q, d_k), ``k`` is (B, N_k, d_k); ``key_mask`` an additive
    (B, 1, N_k) mask from :func:`additive_key_mask`.
    """
    scores = mul(matmul(q, transpose(k)), 1.0 / np.sqrt(d_k))
    if key_mask is not None:
        scores = add(scores, key_mask)
    return softmax(scores, axis=-1)


class MultiHeadAttention:
    """Q/K/V/output projections with ``heads`` parallel attention heads.

    Covers both self-attention (queries == keys) and cross-attention
    (queries from one modality, keys/values from the other).
    """

    def __init__(self, d_query: int, d_key: int, d_attn: int, d_out: int,
                 heads: int, rng: np.random.Generator, prefix: str):
        if d_attn % heads:
            raise ShapeMismatchError(f"heads={heads} must divide d_attn={d_attn}")
        self.heads = heads
        self.d_attn = d_attn
        self.d_head = d_attn // heads
        self.prefix = prefix
        self.w_q = parameter(xavier(rng, d_query, d_attn))
        self.b_q = parameter(np.zeros(d_attn))
        self.w_k = parameter(xavier(rng, d_key, d_attn))
        self.b_k = parameter(np.zeros(d_attn))
        self.w_v = parameter(xavier(rng, d_key, d_attn))
        self.b_v = parameter(np.zeros(d_attn))
        self.w_o = parameter(xavier(rng, d_attn, d_out))
        self.b_o = parameter(np.zeros(d_out))

    def params(self) -> dict:
        names = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")
        return {f"{self.prefix}.{n}": getattr(self, n) for n in names}

    def __call__(self, queries: Tensor, keys: Tensor,
                 key_mask: Optional[np.ndarray] = None,
                 query_mask: Optional[np.ndarray] = None) -> Tensor:
        batch, n_q = queries.shape[0], queries.shape[1]
        n_k = keys.shape[1]
        q = linear(queries, self.w_q, self.b_q)
        k = linear(keys, self.w_k, self.b_k)
        v = linear(keys, self.w_v, self.b_v)
        kmask = additive_key_mask(key_mask, batch, n_k)
        outs = []
        for h in range(self.heads):
            lo = h * self.d_head
            q_h = narrow(q, -1, lo, self.d_head)
            k_h = narrow(k, -1, lo, self.d_head)
            v_h = narrow(v, -1, lo, self.d_head)
            w = attention_weights(q_h, k_h, self.d_head, kmask)
            outs.append(matmul(w, v_h))
        out = linear(concat(outs, axis=-1), self.w_o, self.b_o)
        if query_mask is not None:
            keep = np.asarray(query_mask, dtype=np.float64)[:, :, None]
            out = mul(out, Tensor(keep))
        return out


def self_attention(dim: int, heads: int, rng: np.random.Generator,
                   prefix: str) -> MultiHeadAttention:
    return MultiHeadAttention(dim, dim, dim, dim, heads, rng, prefix)


def self_attend(x: Tensor, mask: Optional[np.ndarray],
                layer: MultiHeadAttention) -> Tensor:
    """Refine one modality's features; masked positions are excluded as keys
    and zeroed as outputs."""
    return layer(x, x, key_mask=mask, query_mask=mask)
