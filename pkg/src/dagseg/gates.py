"""Dual attention gates for U-Net skip connections.

A gate combines two sigmoid maps computed from the skip features ``x`` and the
coarser gating signal ``g``:

* a self-attention map: non-local attention over all spatial positions of ``x``
  and of ``g``, each reduced to one channel by a 1x1 conv, summed, squashed;
* a spatial map: DW-separable conv on each input, sum, LeakyReLU, 1x1 conv to
  one channel, squashed.

The gate multiplies ``x`` by the product of both maps.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from dagseg import nn
from dagseg.nn import Conv2d, DWSeparableConv2d, Module, avg_pool, bilinear_resize
from dagseg.tensor import Tensor


class SelfAttentionVariant(str, Enum):
    FULL = "full"
    SHARED = "shared"
    WEIGHTLESS = "weightless"


class GateMode(str, Enum):
    DUAL = "dual"
    SPATIAL = "spatial"
    SELF = "self"


def nonlocal_self_attention(
    x: Tensor,
    variant: SelfAttentionVariant = SelfAttentionVariant.WEIGHTLESS,
    theta: Tensor | None = None,
    phi: Tensor | None = None,
    value: Tensor | None = None,
) -> Tensor:
    """Softmax-weighted sum over all positions of ``x`` (N, H, W, C).

    ``theta``, ``phi`` and ``value`` are ``(1, 1, C, C)`` kernels. FULL uses all
    three, SHARED uses ``theta`` for every role, WEIGHTLESS uses none.
    Similarities are raw dot products (no temperature).
    """
    variant = SelfAttentionVariant(variant)
    n, h, w, c = x.shape
    tokens = x.reshape(n, h * w, c)

    def project(kernel: Tensor | None, role: str) -> Tensor:
        if kernel is None:
            raise ValueError(f"{variant.value} variant needs a {role} kernel")
        if kernel.shape != (1, 1, c, c):
            raise ValueError(f"{role} kernel {kernel.shape} does not match {c} channels")
        return tokens @ kernel.reshape(c, c)

    if variant is SelfAttentionVariant.WEIGHTLESS:
        out = nn.attention(tokens, tokens, tokens)
    elif variant is SelfAttentionVariant.SHARED:
        p = project(theta, "shared")
        out = nn.attention(p, p, p)
    else:
        out = nn.attention(project(theta, "theta"), project(phi, "phi"), project(value, "value"))
    return out.reshape(n, h, w, c)


class NonLocalAttention(Module):
    def __init__(self, channels: int, variant=SelfAttentionVariant.WEIGHTLESS, rng=None):
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.variant = SelfAttentionVariant(variant)
        self.theta = self.phi = self.value = None
        if self.variant is SelfAttentionVariant.FULL:
            self.theta = Conv2d(channels, channels, 1, rng, bias=False)
            self.phi = Conv2d(channels, channels, 1, rng, bias=False)
            self.value = Conv2d(channels, channels, 1, rng, bias=False)
        elif self.variant is SelfAttentionVariant.SHARED:
            self.theta = Conv2d(channels, channels, 1, rng, bias=False)

    def forward(self, x):
        kernel = lambda m: None if m is None else m.kernel  # noqa: E731
        return nonlocal_self_attention(x, self.variant, kernel(self.theta), kernel(self.phi), kernel(self.value))


def pool_factor(h: int, w: int, budget: int) -> int:
    """Smallest integer factor dividing ``h`` and ``w`` that brings h*w within ``budget`` tokens."""
    if budget < 1:
        raise ValueError("token budget must be positive")
    for p in range(1, min(h, w) + 1):
        if h % p == 0 and w % p == 0 and (h // p) * (w // p) <= budget:
            return p
    raise ValueError(f"cannot pool {h}x{w} to at most {budget} tokens with an integer factor")


class SelfAttentionPath(Module):
    """Non-local attention on ``x`` and ``g``, fused to a single-channel sigmoid map."""

    def __init__(self, x_ch: int, g_ch: int, variant=SelfAttentionVariant.WEIGHTLESS, token_budget: int = 1024, rng=None):
        rng = rng or np.random.default_rng(0)
        self.token_budget = token_budget
        self.attn_x = NonLocalAttention(x_ch, variant, rng)
        self.attn_g = NonLocalAttention(g_ch, variant, rng)
        self.out_x = Conv2d(x_ch, 1, 1, rng)
        self.out_g = Conv2d(g_ch, 1, 1, rng, bias=False)

    def forward(self, x, g):
        h, w = x.shape[1:3]
        p = pool_factor(h, w, self.token_budget)
        xs, gs = avg_pool(x, p), avg_pool(g, p)
        logits = self.out_x(self.attn_x(xs)) + self.out_g(self.attn_g(gs))
        return bilinear_resize(logits.sigmoid(), (h, w))


class SpatialPath(Module):
    def __init__(self, x_ch: int, g_ch: int, inter_ch: int | None = None, kernel_size: int = 3, rng=None):
        rng = rng or np.random.default_rng(0)
        inter_ch = inter_ch or max(1, x_ch // 2)
        self.x_branch = DWSeparableConv2d(x_ch, inter_ch, kernel_size, rng)
        self.g_branch = DWSeparableConv2d(g_ch, inter_ch, kernel_size, rng)
        self.psi = Conv2d(inter_ch, 1, 1, rng)

    def forward(self, x, g):
        if x.shape[1:3] != g.shape[1:3]:
            raise ValueError(f"x {x.shape} and g {g.shape} are not spatially aligned")
        s = (self.x_branch(x) + self.g_branch(g)).leaky_relu(nn.LEAKY_SLOPE)
        return self.psi(s).sigmoid()


def spatial_gate(x: Tensor, g: Tensor, path: SpatialPath) -> Tensor:
    """Spatial attention map in (0, 1), shape ``(N, H, W, 1)``."""
    return path(x, g)


class DualAttentionGate(Module):
    """Gate for one skip connection; ``g`` is resized to ``x`` before both paths."""

    def __init__(
        self,
        x_ch: int,
        g_ch: int,
        variant=SelfAttentionVariant.WEIGHTLESS,
        mode=GateMode.DUAL,
        token_budget: int = 1024,
        kernel_size: int = 3,
        rng=None,
    ):
        rng = rng or np.random.default_rng(0)
        self.mode = GateMode(mode)
        self.self_path = None
        self.spatial_path = None
        if self.mode in (GateMode.DUAL, GateMode.SELF):
            self.self_path = SelfAttentionPath(x_ch, g_ch, variant, token_budget, rng)
        if self.mode in (GateMode.DUAL, GateMode.SPATIAL):
            self.spatial_path = SpatialPath(x_ch, g_ch, kernel_size=kernel_size, rng=rng)

    def coefficients(self, x: Tensor, g: Tensor) -> Tensor:
        """Attention map ``(N, H, W, 1)``; both paths multiplied in dual mode."""
        g = bilinear_resize(g, x.shape[1:3])
        alpha = None
        if self.self_path is not None:
            alpha = self.self_path(x, g)
        if self.spatial_path is not None:
            a_sp = self.spatial_path(x, g)
            alpha = a_sp if alpha is None else alpha * a_sp
        return alpha

    def forward(self, x, g):
        return x * self.coefficients(x, g)


def dual_attention_gate(x: Tensor, g: Tensor, gate: DualAttentionGate) -> Tensor:
    return gate(x, g)
