"""Scaled dot-product attention, multi-head composition and the latent transformer block."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from . import numerics as nx
from .errors import ConfigError, DimensionError, EmptyInputError
from .layers import FeedForward, LayerNorm, Linear, Module


@dataclass
class AttentionConfig:
    d_k: int = 64
    heads: int = 4
    temperature: Optional[float] = None  # None -> sqrt(d_k)

    def __post_init__(self):
        if self.d_k < 1 or self.heads < 1:
            raise ConfigError(f"d_k and heads must be >= 1, got d_k={self.d_k}, heads={self.heads}")
        if self.temperature is not None and not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")

    @property
    def tau(self) -> float:
        return math.sqrt(self.d_k) if self.temperature is None else float(self.temperature)

    @property
    def inner(self) -> int:
        return self.heads * self.d_k


def scaled_dot_attention(q, k, v, tau):
    """softmax(q k^T / tau) v over the last two axes.

    Returns ``(output, weights)``; the weights are kept so callers can expose
    them as per-instance attention scores.
    """
    if k.shape[-2] == 0:
        raise EmptyInputError("attention over zero keys (empty bag)")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes disagree: Q{q.shape} K{k.shape} V{v.shape}")
    logits = nx.matmul(q, nx.transpose(k, _swap_last(k.data.ndim)))
    weights = nx.stable_softmax(logits, tau)
    return nx.matmul(weights, v), weights


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def split_heads(x, heads):
    n, width = x.shape
    if width % heads:
        raise ConfigError(f"width {width} is not divisible by {heads} heads")
    return nx.transpose(nx.reshape(x, (n, heads, width // heads)), (1, 0, 2))


def merge_heads(x):
    heads, n, d = x.shape
    return nx.reshape(nx.transpose(x, (1, 0, 2)), (n, heads * d))


def multi_head_attention(q, k, v, heads, tau):
    """Per-head attention on pre-projected (rows x heads*d) inputs, heads concatenated.

    Returns the merged (m x heads*d_v) output and the (heads x m x n) weights.
    """
    out, weights = scaled_dot_attention(split_heads(q, heads), split_heads(k, heads),
                                        split_heads(v, heads), tau)
    return merge_heads(out), weights


class MultiHeadAttention(Module):
    """Q/K/V projections, per-head attention and an output projection back to ``out_dim``."""

    def __init__(self, q_dim, kv_dim, out_dim, config: AttentionConfig, rng):
        self.config = config
        self.to_q = Linear(q_dim, config.inner, rng)
        self.to_k = Linear(kv_dim, config.inner, rng)
        self.to_v = Linear(kv_dim, config.inner, rng)
        self.to_out = Linear(config.inner, out_dim, rng)

    def __call__(self, queries, context, return_weights=False):
        out, weights = multi_head_attention(self.to_q(queries), self.to_k(context),
                                            self.to_v(context), self.config.heads, self.config.tau)
        out = self.to_out(out)
        return (out, weights) if return_weights else out


class TransformerBlock(Module):
    """Pre-norm residual block: x + MHA(LN(x)), then + MLP(LN(.)) with a 2*D GELU hidden layer."""

    def __init__(self, dim, config: AttentionConfig, rng):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, dim, dim, config, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = FeedForward(dim, 2 * dim, dim, rng)

    def __call__(self, x):
        if x.shape[0] < 1:
            raise DimensionError("transformer block needs at least one latent row")
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.norm2(x))
