"""Dual-query Perceiver aggregator.

Two learned query arrays attend over the same keys/values of a bag:

* the M-row latent array is compressed into a fixed-size latent, refined by
  ``J`` transformer blocks and mean-pooled into ``t_sa``;
* the single-row query produces one softmax over instances, whose weighted
  value sum is ``t_mil`` and whose weights are the instance attention scores.

Each token feeds its own classifier head; inference blends the two
distributions with weight ``b``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .attention import AttentionConfig, TransformerBlock, multi_head_attention, scaled_dot_attention
from .dme import DynamicMetaEmbedder, SourceSpec
from .errors import ConfigError, DimensionError, EmptyInputError, ParameterError
from .layers import FeedForward, LayerNorm, Linear, Module

VARIANTS = ("mil-only", "perceiver-only", "dq-ce", "dq-sd")


@dataclass
class DQConfig:
    sources: list = field(default_factory=lambda: [SourceSpec("src0", 32)])
    num_latents: int = 16          # M
    dim: int = 256                 # D
    d_k: int = 64
    depth: int = 2                 # J
    heads: int = 4
    num_classes: int = 2           # K
    temperature: Optional[float] = None  # None -> sqrt(d_k)
    blend: float = 0.5             # b
    variant: str = "dq-sd"
    select_source: Optional[str] = None

    def __post_init__(self):
        self.sources = [s if isinstance(s, SourceSpec) else SourceSpec(**s) for s in self.sources]
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.num_latents < 1:
            raise ConfigError("num_latents (M) must be >= 1")
        if self.depth < 0:
            raise ConfigError("depth (J) must be >= 0")
        if self.num_classes < 2:
            raise ConfigError("num_classes (K) must be >= 2")
        if not 0.0 <= self.blend <= 1.0:
            raise ConfigError(f"blend weight b must lie in [0, 1], got {self.blend}")
        if self.heads * self.d_k != self.dim:
            raise ConfigError(f"heads * d_k = {self.heads * self.d_k} must equal dim D = {self.dim}")
        if self.temperature is not None and not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")

    @property
    def tau(self) -> float:
        return math.sqrt(self.d_k) if self.temperature is None else float(self.temperature)

    @property
    def uses_sa(self):
        return self.variant != "mil-only"

    @property
    def uses_mil(self):
        return self.variant != "perceiver-only"

    def to_dict(self):
        d = asdict(self)
        d["sources"] = [s.to_dict() for s in self.sources]
        return d


@dataclass
class BagOutput:
    """Per-bag results. Fields of an inactive pathway are ``None``."""

    t_sa: Optional[nx.Tensor]
    t_mil: Optional[nx.Tensor]
    p_sa: Optional[nx.Tensor]
    p_mil: Optional[nx.Tensor]
    p: nx.Tensor
    attention: nx.Tensor  # a_i, one weight per instance


class DualQueryCrossAttention(Module):
    """Shared K/V projections of the bag, queried by an M x D latent array and a 1 x D MIL query."""

    def __init__(self, in_dim, config: DQConfig, rng):
        d = config.dim
        self.latents = nx.trunc_normal_init((config.num_latents, d), rng, name="latents")
        self.mil_query = nx.trunc_normal_init((1, d), rng, name="mil_query")
        self.to_k = Linear(in_dim, d, rng)
        self.to_v = Linear(in_dim, d, rng)
        self.norm_q1 = LayerNorm(d)
        self.to_q1 = Linear(d, d, rng)
        self.to_out1 = Linear(d, d, rng)
        self.norm_mlp = LayerNorm(d)
        self.mlp = FeedForward(d, 2 * d, d, rng)
        self.norm_q2 = LayerNorm(d)
        self.to_q2 = Linear(d, d, rng)
        self.heads = config.heads
        self.in_dim = in_dim

    def keys_values(self, bag):
        if bag.shape[0] == 0:
            raise EmptyInputError("bag has no instances")
        if bag.shape[-1] != self.in_dim:
            raise DimensionError(f"bag width {bag.shape[-1]} does not match model input width {self.in_dim}")
        return self.to_k(bag), self.to_v(bag)

    def mil_path(self, k, v, tau):
        q2 = self.to_q2(self.norm_q2(self.mil_query))
        token, weights = scaled_dot_attention(q2, k, v, tau)
        return token[0], weights[0]

    def latent_path(self, k, v, tau):
        q1 = self.to_q1(self.norm_q1(self.latents))
        out, weights = multi_head_attention(q1, k, v, self.heads, tau)
        x = self.latents + self.to_out1(out)
        return x + self.mlp(self.norm_mlp(x)), weights

    def __call__(self, bag, tau, sa=True, mil=True):
        """Returns ``(latent, t_mil, a, q1_weights)``; skipped paths give ``None``."""
        k, v = self.keys_values(bag)
        latent = q1_weights = t_mil = a = None
        if sa:
            latent, q1_weights = self.latent_path(k, v, tau)
        if mil:
            t_mil, a = self.mil_path(k, v, tau)
        return latent, t_mil, a, q1_weights


def latent_transformer_stack(latent, blocks: Sequence[TransformerBlock]):
    for block in blocks:
        latent = block(latent)
    return latent


def pool_latent(latent):
    if latent.shape[0] < 1:
        raise DimensionError("cannot pool an empty latent array")
    return nx.mean_axis(latent, axis=0)


def classify(token, head: FeedForward):
    return nx.stable_softmax(head(token))


def blend(p_sa, p_mil, b):
    if not 0.0 <= b <= 1.0:
        raise ParameterError(f"blend weight b must lie in [0, 1], got {b}")
    if isinstance(p_sa, nx.Tensor):
        return p_sa * b + p_mil * (1.0 - b)
    return b * np.asarray(p_sa) + (1.0 - b) * np.asarray(p_mil)


class DQModel(Module):
    def __init__(self, config: DQConfig, seed: int = 0):
        self.config = config
        rng = nx.make_rng(seed)
        self.embedder = DynamicMetaEmbedder(config.sources, rng, select=config.select_source)
        self.cross = DualQueryCrossAttention(self.embedder.out_width, config, rng)
        block_cfg = AttentionConfig(d_k=config.d_k, heads=config.heads)
        self.blocks = [TransformerBlock(config.dim, block_cfg, rng) for _ in range(config.depth)]
        self.head_sa = FeedForward(config.dim, config.dim, config.num_classes, rng)
        self.head_mil = FeedForward(config.dim, config.dim, config.num_classes, rng)

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def embed(self, sources):
        return self.embedder(sources)

    def forward(self, sources, tau=None) -> BagOutput:
        cfg = self.config
        tau = cfg.tau if tau is None else tau
        bag = self.embed(sources)
        latent, t_mil, a, q1_weights = self.cross(bag, tau, sa=cfg.uses_sa, mil=cfg.uses_mil)
        t_sa = p_sa = p_mil = None
        if cfg.uses_sa:
            t_sa = pool_latent(latent_transformer_stack(latent, self.blocks))
            p_sa = classify(t_sa, self.head_sa)
        if cfg.uses_mil:
            p_mil = classify(t_mil, self.head_mil)
        if p_sa is None:
            p = p_mil
        elif p_mil is None:
            p = p_sa
            # no MIL query: report Q1 weights averaged over heads and latents
            a = nx.mean_axis(nx.mean_axis(q1_weights, axis=0), axis=0)
        else:
            p = blend(p_sa, p_mil, cfg.blend)
        return BagOutput(t_sa=t_sa, t_mil=t_mil, p_sa=p_sa, p_mil=p_mil, p=p, attention=a)

    __call__ = forward

    def instance_logits(self, sources) -> np.ndarray:
        """Temperature-free MIL scores ``q2 . k_i``; softmax(logits / tau) gives the attention."""
        if not self.config.uses_mil:
            raise ConfigError("instance logits need the MIL pathway")
        with nx.no_grad():
            k, _ = self.cross.keys_values(self.embed(sources))
            q2 = self.cross.to_q2(self.cross.norm_q2(self.cross.mil_query))
            return (q2.data @ k.data.T)[0].astype(np.float64)
