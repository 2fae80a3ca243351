"""Shared transformer building blocks.

Everything is written against [..., tokens, channels] layouts so the same
primitives serve the motion encoders (cross-attention over latent tokens),
the flow decoder (per-frame self-attention + temporal attention), and the
motion generator.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import ConfigurationError


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int = 1) -> torch.Tensor:
    """softmax(q k^T / sqrt(head_dim)) v over the last two dims.

    q: [..., Lq, d], k/v: [..., Lkv, d]. With heads=1 the temperature is
    sqrt(d); with more heads, d is split evenly and attention runs per head.
    """
    d = q.shape[-1]
    if d == 0:
        raise ConfigurationError("attention over zero channels")
    if k.shape[-2] == 0:
        raise ConfigurationError("attention over an empty key/value set")
    if d % heads != 0:
        raise ConfigurationError(f"channels {d} not divisible by heads {heads}")
    hd = d // heads
    qh = q.unflatten(-1, (heads, hd)).transpose(-3, -2)  # [..., H, Lq, hd]
    kh = k.unflatten(-1, (heads, hd)).transpose(-3, -2)
    vh = v.unflatten(-1, (heads, hd)).transpose(-3, -2)
    logits = qh @ kh.transpose(-2, -1) / math.sqrt(hd)
    out = torch.softmax(logits, dim=-1) @ vh
    return out.transpose(-3, -2).flatten(-2)


def cross_attention(q: torch.Tensor, kv: torch.Tensor, heads: int = 1) -> torch.Tensor:
    """Projection-free cross-attention: every output row is a convex
    combination of kv rows."""
    return attend(q, kv, kv, heads=heads)


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Fixed sin/cos encoding; positions [L] -> [L, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1)
    )
    args = positions.double()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(len(positions), 1, dtype=emb.dtype)], dim=-1)
    return emb.float()


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of flow time t in [0, 1]; t [B] -> [B, dim]."""
    return sinusoidal_embedding(t.reshape(-1) * 1000.0, dim).to(t.dtype)


class Attention(nn.Module):
    """Multi-head attention with separate q/k/v/out projections."""

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        kv_dim = kv_dim if kv_dim is not None else dim
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, kv: torch.Tensor | None = None) -> torch.Tensor:
        kv = x if kv is None else kv
        out = attend(self.q_proj(x), self.k_proj(kv), self.v_proj(kv), heads=self.heads)
        return self.out_proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float = 2.0):
        super().__init__()
        hidden = max(int(dim * ratio), 1)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale) + shift


class TimeModulation(nn.Module):
    """Maps a time feature to per-sublayer (shift, scale) pairs.

    Zero-initialized so modulation starts as the identity.
    """

    def __init__(self, time_dim: int, dim: int, n_sublayers: int):
        super().__init__()
        self.n = n_sublayers
        self.dim = dim
        self.proj = nn.Linear(time_dim, 2 * dim * n_sublayers)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, t_feat: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        # t_feat [B, time_dim] -> n pairs of [B, 1, dim]
        chunks = self.proj(t_feat).unflatten(-1, (self.n, 2, self.dim))
        return [(chunks[:, i, 0].unsqueeze(1), chunks[:, i, 1].unsqueeze(1)) for i in range(self.n)]


class SelfAttentionBlock(nn.Module):
    """Pre-norm self-attention + MLP with residuals."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x, mods=None):
        h = self.norm1(x)
        if mods is not None:
            h = modulate(h, *mods[0])
        x = x + self.attn(h)
        h = self.norm2(x)
        if mods is not None:
            h = modulate(h, *mods[1])
        return x + self.mlp(h)


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross-attention (queries attend kv) + MLP with residuals."""

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None, mlp_ratio: float = 2.0):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(kv_dim if kv_dim is not None else dim)
        self.attn = Attention(dim, heads, kv_dim=kv_dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, q, kv):
        q = q + self.attn(self.norm_q(q), self.norm_kv(kv))
        return q + self.mlp(self.norm2(q))
