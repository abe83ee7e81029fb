"""Transformer building blocks: embeddings, attention, feed-forward, heads.

Weights live in flat ``dict[str, Tensor]`` maps; a block reads the entries
under its own prefix (``"enc.0.attn.wq"`` and so on). Blocks are pure
functions of (weights, inputs).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor

Params = Mapping[str, Tensor]


class CapacityError(ValueError):
    """Sequence longer than the position table allows."""


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int
    causal: bool = False
    cross: bool = False
    pre_norm: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        if self.num_heads < 1 or self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by {self.num_heads} heads")
        if self.causal and self.cross:
            raise ValueError("causal masking is only defined for self-attention")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_attention(rng, prefix: str, d: int) -> dict[str, np.ndarray]:
    w = {}
    for name in ("q", "k", "v", "o"):
        w[f"{prefix}w{name}"] = trunc_normal(rng, (d, d))
        w[f"{prefix}b{name}"] = np.zeros(d)
    w[f"{prefix}ln_g"] = np.ones(d)
    w[f"{prefix}ln_b"] = np.zeros(d)
    return w


def init_pffn(rng, prefix: str, d: int, expansion: int = 4) -> dict[str, np.ndarray]:
    return {
        f"{prefix}w1": trunc_normal(rng, (d, expansion * d)),
        f"{prefix}b1": np.zeros(expansion * d),
        f"{prefix}w2": trunc_normal(rng, (expansion * d, d)),
        f"{prefix}b2": np.zeros(d),
        f"{prefix}ln_g": np.ones(d),
        f"{prefix}ln_b": np.zeros(d),
    }


def embed(tokens, table: Tensor) -> Tensor:
    """Look up token rows; ids must be below the table size."""
    return ag.gather_rows(table, tokens)


def add_positions(x: Tensor, pos_table: Tensor) -> Tensor:
    length = x.shape[-2]
    if length > pos_table.shape[0]:
        raise CapacityError(f"sequence length {length} exceeds position capacity {pos_table.shape[0]}")
    return x + ag.gather_rows(pos_table, np.arange(length))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x @ w
    return y + b if b is not None else y


def linear_head(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine classification head; ``x`` is [D] or [..., D]."""
    if x.ndim == 1:
        return linear(x.reshape(1, -1), w, b).reshape(w.shape[1])
    return linear(x, w, b)


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def causal_mask(n_q: int, n_k: int) -> np.ndarray:
    """Additive mask: -1e9 where key index exceeds query index."""
    return np.triu(np.full((n_q, n_k), -1e9), k=1)


def attention_core(q_in: Tensor, kv_in: Tensor, w: Params, prefix: str, cfg: AttentionConfig,
                   return_weights: bool = False):
    """Multi-head scaled dot-product attention with output projection (no residual)."""
    squeeze = q_in.ndim == 2
    if squeeze:
        q_in = q_in.reshape(1, *q_in.shape)
        kv_in = kv_in.reshape(1, *kv_in.shape)
    h = cfg.num_heads
    q = _split_heads(linear(q_in, w[prefix + "wq"], w[prefix + "bq"]), h)
    k = _split_heads(linear(kv_in, w[prefix + "wk"], w[prefix + "bk"]), h)
    v = _split_heads(linear(kv_in, w[prefix + "wv"], w[prefix + "bv"]), h)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(cfg.head_dim))
    if cfg.causal:
        scores = scores + causal_mask(scores.shape[-2], scores.shape[-1])
    attn = ag.softmax(scores, axis=-1)
    ctx = _merge_heads(attn @ v)
    out = linear(ctx, w[prefix + "wo"], w[prefix + "bo"])
    if squeeze:
        out = out.reshape(*out.shape[1:])
    return (out, attn) if return_weights else out


def _sublayer(x: Tensor, fn, w: Params, prefix: str, pre_norm: bool, rate: float, rng) -> Tensor:
    g, b = w[prefix + "ln_g"], w[prefix + "ln_b"]
    if pre_norm:
        return x + ag.dropout(fn(ag.layer_norm(x, g, b)), rate, rng)
    return ag.layer_norm(x + ag.dropout(fn(x), rate, rng), g, b)


def attention(q_in: Tensor, kv_in: Tensor, w: Params, prefix: str, cfg: AttentionConfig,
              rng: np.random.Generator | None = None) -> Tensor:
    """Attention sublayer: residual connection plus layer norm around :func:`attention_core`.

    For cross attention only the query stream is normalised (pre-norm) and
    carried on the residual path; ``kv_in`` is used as given.
    """
    if not cfg.cross and q_in is not kv_in:
        raise ValueError("self-attention expects q_in and kv_in to be the same tensor")
    if cfg.cross:
        return _sublayer(q_in, lambda x: attention_core(x, kv_in, w, prefix, cfg), w, prefix,
                         cfg.pre_norm, cfg.dropout, rng)
    return _sublayer(q_in, lambda x: attention_core(x, x, w, prefix, cfg), w, prefix,
                     cfg.pre_norm, cfg.dropout, rng)


def pffn(x: Tensor, w: Params, prefix: str, pre_norm: bool = False, rate: float = 0.0,
         rng: np.random.Generator | None = None) -> Tensor:
    """Position-wise linear -> GELU -> linear, wrapped in residual + layer norm."""
    def ff(z):
        return linear(ag.gelu(linear(z, w[prefix + "w1"], w[prefix + "b1"])), w[prefix + "w2"], w[prefix + "b2"])

    return _sublayer(x, ff, w, prefix, pre_norm, rate, rng)


def encoder_block(x: Tensor, w: Params, prefix: str, cfg: AttentionConfig, rng=None) -> Tensor:
    x = attention(x, x, w, prefix + "attn.", cfg, rng)
    return pffn(x, w, prefix + "ffn.", cfg.pre_norm, cfg.dropout, rng)


def decoder_block(x: Tensor, memory: Tensor | None, w: Params, prefix: str, cfg: AttentionConfig,
                  rng=None) -> Tensor:
    """Masked self-attention, optional cross-attention over ``memory``, then PFFN."""
    self_cfg = AttentionConfig(cfg.model_dim, cfg.num_heads, causal=True, pre_norm=cfg.pre_norm,
                               dropout=cfg.dropout)
    x = attention(x, x, w, prefix + "self.", self_cfg, rng)
    if memory is not None:
        cross_cfg = AttentionConfig(cfg.model_dim, cfg.num_heads, cross=True, pre_norm=cfg.pre_norm,
                                    dropout=cfg.dropout)
        x = attention(x, memory, w, prefix + "cross.", cross_cfg, rng)
    return pffn(x, w, prefix + "ffn.", cfg.pre_norm, cfg.dropout, rng)
