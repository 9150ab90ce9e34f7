"""Quality-aware decoder: CLS-driven queries, panel embeddings, cross-attention.

The decoder turns the encoder CLS token, summed with L learnable panel
embeddings, into L queries via one self-attention block, cross-attends those
queries to the patch features, and scores each resulting quality embedding
with a shared MLP head. The image score is the mean of the L panel scores.
"""
from __future__ import annotations

from dataclasses import dataclass


from .encoder import (AttentionParams, ModelConfig, attention, init_attention,
                      mhsa, _ones, _param, _zeros)
from .tensor import Rng, Tensor, gelu, layer_norm, matmul


@dataclass
class QueryBlockParams:
    """Self-attention block that turns panel inputs into decoder queries."""
    ln_gain: Tensor
    ln_bias: Tensor
    attn: AttentionParams


@dataclass
class CrossBlockParams:
    """One cross-attention layer: query norm, MHCA, then an MLP."""
    lnq_gain: Tensor
    lnq_bias: Tensor
    attn: AttentionParams
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


@dataclass
class HeadParams:
    """Shared scoring MLP, D -> D/2 -> 1 with GELU."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def init_query_block(cfg: ModelConfig, rng: Rng, dtype) -> QueryBlockParams:
    D = cfg.token_dim
    return QueryBlockParams(ln_gain=_ones((D,), dtype), ln_bias=_zeros((D,), dtype),
                            attn=init_attention(cfg, rng, dtype))


def init_cross_block(cfg: ModelConfig, rng: Rng, dtype) -> CrossBlockParams:
    D, Dm = cfg.token_dim, cfg.mlp_dim
    return CrossBlockParams(
        lnq_gain=_ones((D,), dtype), lnq_bias=_zeros((D,), dtype),
        attn=init_attention(cfg, rng, dtype),
        mlp_w1=_param(rng, (D, Dm), 0.02, dtype), mlp_b1=_zeros((Dm,), dtype),
        mlp_w2=_param(rng, (Dm, D), 0.02, dtype), mlp_b2=_zeros((D,), dtype))


def init_head(cfg: ModelConfig, rng: Rng, dtype) -> HeadParams:
    D = cfg.token_dim
    Dh = max(1, D // 2)
    return HeadParams(w1=_param(rng, (D, Dh), 0.02, dtype), b1=_zeros((Dh,), dtype),
                      w2=_param(rng, (Dh, 1), 0.02, dtype), b2=_zeros((1,), dtype))


def init_panel(cfg: ModelConfig, rng: Rng, dtype) -> Tensor:
    """Panel embeddings J, one row per member, small random init."""
    return Tensor(rng.trunc_normal((cfg.panel_size, cfg.token_dim), std=0.02,
                                   dtype=dtype), requires_grad=True)


def panel_inputs(t_cls: Tensor, panel: Tensor) -> Tensor:
    """Expand the CLS token over panel members: row l = t_cls + panel[l].

    t_cls: (B, 1, D) or (1, D); panel: (L, D). Returns (B, L, D) / (L, D).
    """
    if t_cls.shape[-1] != panel.shape[-1]:
        raise ValueError(
            f"width mismatch: cls {t_cls.shape} vs panel {panel.shape}")
    return t_cls + panel


def make_queries(x: Tensor, block: QueryBlockParams, heads: int,
                 eps: float = 1e-6) -> Tensor:
    """Decoder queries: self-attention over the panel inputs plus residual."""
    return mhsa(layer_norm(x, block.ln_gain, block.ln_bias, eps),
                block.attn, heads) + x


def cross_attend(queries: Tensor, patch_feats: Tensor, block: CrossBlockParams,
                 heads: int, eps: float = 1e-6):
    """One decoder layer: MHCA of normed queries over patch features, residual,
    then the MLP. Returns (output, per-head attention weights (B,h,L,N))."""
    if patch_feats.shape[-2] == 0:
        raise ValueError("cross_attend requires at least one patch feature")
    single = queries.ndim == 2
    q = queries.reshape((1,) + queries.shape) if single else queries
    kv = patch_feats.reshape((1,) + patch_feats.shape) if patch_feats.ndim == 2 else patch_feats
    attended, weights = attention(
        layer_norm(q, block.lnq_gain, block.lnq_bias, eps), kv, block.attn,
        heads, return_weights=True)
    mid = attended + q
    h = gelu(matmul(mid, block.mlp_w1) + block.mlp_b1)
    out = matmul(h, block.mlp_w2) + block.mlp_b2
    if single:
        out = out.reshape(out.shape[1:])
        weights = weights[0]
    return out, weights


def score_head(embeddings: Tensor, head: HeadParams) -> Tensor:
    """Apply the shared MLP head per row: (..., L, D) -> (..., L)."""
    h = gelu(matmul(embeddings, head.w1) + head.b1)
    out = matmul(h, head.w2) + head.b2
    return out.reshape(out.shape[:-1])
