"""Positional-encoding-free transformer block for the network bottleneck."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dagseg import nn
from dagseg.nn import LayerNorm, Linear, Module
from dagseg.tensor import Tensor


@dataclass
class TransformerConfig:
    embed_dim: int = 128
    num_heads: int = 4
    # every head gets its own full-width Q/K/V, so parameters grow linearly with heads
    head_dim: int | None = None
    mlp_ratio: float = 1.0
    use_positional_encoding: bool = False

    def __post_init__(self):
        if self.use_positional_encoding:
            raise ValueError("positional encodings are not supported by this block")
        if self.num_heads < 1:
            raise ValueError("num_heads must be >= 1")
        if self.head_dim is None:
            self.head_dim = self.embed_dim
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")

    @property
    def mlp_dim(self) -> int:
        return max(1, int(round(self.embed_dim * self.mlp_ratio)))

    def per_head_params(self) -> int:
        e, d = self.embed_dim, self.head_dim
        return 3 * (e * d + d) + d * e


class MultiHeadSelfAttention(Module):
    def __init__(self, cfg: TransformerConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        width = cfg.num_heads * cfg.head_dim
        self.query = Linear(cfg.embed_dim, width, rng)
        self.key = Linear(cfg.embed_dim, width, rng)
        self.value = Linear(cfg.embed_dim, width, rng)
        self.out = Linear(width, cfg.embed_dim, rng)

    def _split(self, t: Tensor, n: int, length: int) -> Tensor:
        h, d = self.cfg.num_heads, self.cfg.head_dim
        return t.reshape(n, length, h, d).transpose(0, 2, 1, 3).reshape(n * h, length, d)

    def forward(self, x):
        n, hh, ww, c = x.shape
        if c != self.cfg.embed_dim:
            raise ValueError(f"expected {self.cfg.embed_dim} channels, got {c}")
        length = hh * ww
        tokens = x.reshape(n, length, c)
        q = self._split(self.query(tokens), n, length)
        k = self._split(self.key(tokens), n, length)
        v = self._split(self.value(tokens), n, length)
        heads = nn.attention(q, k, v, scale=1.0 / math.sqrt(self.cfg.head_dim))
        h, d = self.cfg.num_heads, self.cfg.head_dim
        merged = heads.reshape(n, h, length, d).transpose(0, 2, 1, 3).reshape(n, length, h * d)
        return self.out(merged).reshape(n, hh, ww, c)


def mhsa(x: Tensor, attn: MultiHeadSelfAttention) -> Tensor:
    return attn(x)


class TransformerBlock(Module):
    """Pre-norm block: ``x + MHSA(LN(x))`` then ``+ MLP(LN(.))``."""

    def __init__(self, cfg: TransformerConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.norm1 = LayerNorm(cfg.embed_dim)
        self.attn = MultiHeadSelfAttention(cfg, rng)
        self.norm2 = LayerNorm(cfg.embed_dim)
        self.fc1 = Linear(cfg.embed_dim, cfg.mlp_dim, rng)
        self.fc2 = Linear(cfg.mlp_dim, cfg.embed_dim, rng)

    def forward(self, x):
        y = x + self.attn(self.norm1(x))
        hidden = self.fc1(self.norm2(y)).leaky_relu(nn.LEAKY_SLOPE)
        return y + self.fc2(hidden)
