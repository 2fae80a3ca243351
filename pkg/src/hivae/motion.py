"""Hierarchical motion encoders.

The global encoder reads the low-band latent: spatial positions are flattened,
optionally zero-masked, and every (position, frame) cell becomes one kv token;
a learnable query grid [f_g, n_g, c_g] attends over the full kv set through a
stack of cross-attention blocks. The detailed encoder reads the high-band
latent frame by frame: spatial tokens plus n_d learnable slots run through
self-attention, and the slot outputs are kept.

Both encoders end in a Gaussian head (mu, logvar) for the KL term.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import DetailedMotionConfig, GlobalMotionConfig
from .errors import ConfigurationError
from .nn_core import CrossAttentionBlock, SelfAttentionBlock, sinusoidal_embedding

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0


@dataclass
class SpatialMask:
    keep: torch.Tensor  # [hw] float, 1 = keep, 0 = masked
    ratio: float


@dataclass
class MotionLatent:
    u_g: torch.Tensor  # [B, f_g, n_g, c_g]
    u_d: torch.Tensor  # [B, f_d, n_d, c_d]
    mu_g: torch.Tensor
    logvar_g: torch.Tensor
    mu_d: torch.Tensor
    logvar_d: torch.Tensor


def sample_spatial_mask(
    hw: int, rng: torch.Generator, lo: float = 0.30, hi: float = 0.50
) -> SpatialMask:
    """Zero-mask a uniformly drawn fraction of the hw spatial positions."""
    if hw < 1:
        raise ConfigurationError(f"hw must be >= 1, got {hw}")
    ratio = lo + (hi - lo) * torch.rand((), generator=rng).item()
    n_masked = int(round(ratio * hw))
    keep = torch.ones(hw)
    if n_masked > 0:
        masked = torch.randperm(hw, generator=rng)[:n_masked]
        keep[masked] = 0.0
    return SpatialMask(keep=keep, ratio=ratio)


def reparameterize(
    mu: torch.Tensor,
    logvar: torch.Tensor,
    rng: torch.Generator | None = None,
    stochastic: bool = True,
) -> torch.Tensor:
    """mu + exp(logvar/2) * eta with eta ~ N(0, I); returns mu when deterministic."""
    if mu.shape != logvar.shape:
        raise ConfigurationError("mu and logvar shapes differ")
    if not stochastic:
        return mu
    eta = torch.empty_like(mu).normal_(generator=rng)
    return mu + torch.exp(0.5 * logvar) * eta


class _GaussianHead(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, 2 * dim)

    def forward(self, x):
        mu, logvar = self.proj(x).chunk(2, dim=-1)
        return mu, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)


class GlobalMotionEncoder(nn.Module):
    def __init__(self, latent_channels: int, cfg: GlobalMotionConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.in_proj = nn.Linear(latent_channels, cfg.c_g)
        self.queries = nn.Parameter(torch.randn(cfg.f_g, cfg.n_g, cfg.c_g) * 0.02)
        self.blocks = nn.ModuleList(
            CrossAttentionBlock(cfg.c_g, cfg.heads) for _ in range(cfg.layers)
        )
        self.norm_out = nn.LayerNorm(cfg.c_g)
        self.head = _GaussianHead(cfg.c_g)

    def forward(
        self,
        z_low: torch.Tensor,
        mask: SpatialMask | None = None,
        rng: torch.Generator | None = None,
        stochastic: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """z_low [B,c,f,h,w] -> (u_g, mu_g, logvar_g), each [B, f_g, n_g, c_g]."""
        b, c, f, h, w = z_low.shape
        x = z_low.permute(0, 3, 4, 2, 1).reshape(b, h * w, f, c)  # spatial folded out front
        if mask is not None:
            if mask.keep.numel() != h * w:
                raise ConfigurationError(
                    f"mask length {mask.keep.numel()} != spatial positions {h * w}"
                )
            x = x * mask.keep.to(x.dtype)[None, :, None, None]
        kv = self.in_proj(x.reshape(b, h * w * f, c))
        frame_idx = torch.arange(f).repeat(h * w)  # token order: position-major
        kv = kv + sinusoidal_embedding(frame_idx, self.cfg.c_g).to(kv.dtype)
        q = self.queries.reshape(1, -1, self.cfg.c_g).expand(b, -1, -1)
        for blk in self.blocks:
            q = blk(q, kv)
        mu, logvar = self.head(self.norm_out(q))
        shape = (b, self.cfg.f_g, self.cfg.n_g, self.cfg.c_g)
        mu, logvar = mu.reshape(shape), logvar.reshape(shape)
        u = reparameterize(mu, logvar, rng=rng, stochastic=stochastic)
        return u, mu, logvar


class DetailedMotionEncoder(nn.Module):
    def __init__(self, latent_channels: int, cfg: DetailedMotionConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.in_proj = nn.Linear(latent_channels, cfg.c_d)
        self.tokens = nn.Parameter(torch.randn(cfg.f_d, cfg.n_d, cfg.c_d) * 0.02)
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(cfg.c_d, cfg.heads) for _ in range(cfg.layers)
        )
        self.norm_out = nn.LayerNorm(cfg.c_d)
        self.head = _GaussianHead(cfg.c_d)

    def tokenize(self, z_high: torch.Tensor) -> torch.Tensor:
        """[B,c,f,h,w] -> per-frame sequences [B, f, hw + n_d, c_d] with
        positional encodings already attached to every token."""
        b, c, f, h, w = z_high.shape
        if f != self.cfg.f_d:
            raise ConfigurationError(f"latent frames {f} != configured f_d {self.cfg.f_d}")
        x = z_high.permute(0, 2, 3, 4, 1).reshape(b, f, h * w, c)
        spatial = self.in_proj(x)  # [B, f, hw, c_d]
        slots = self.tokens.unsqueeze(0).expand(b, -1, -1, -1)
        seq = torch.cat([spatial, slots], dim=2)  # [B, f, hw + n_d, c_d]
        pos = sinusoidal_embedding(torch.arange(h * w + self.cfg.n_d), self.cfg.c_d)
        return seq + pos.to(seq.dtype)[None, None]

    def encode_tokens(
        self,
        seq: torch.Tensor,
        rng: torch.Generator | None = None,
        stochastic: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Run the blocks and read out the trailing n_d slot tokens per frame."""
        b, f, total, c_d = seq.shape
        n_d = self.cfg.n_d
        x = seq.reshape(b * f, total, c_d)  # frames into batch
        for blk in self.blocks:
            x = blk(x)
        out = x[:, total - n_d:, :].reshape(b, f, n_d, c_d)
        mu, logvar = self.head(self.norm_out(out))
        u = reparameterize(mu, logvar, rng=rng, stochastic=stochastic)
        return u, mu, logvar

    def forward(
        self,
        z_high: torch.Tensor,
        rng: torch.Generator | None = None,
        stochastic: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """z_high [B,c,f,h,w] -> (u_d, mu_d, logvar_d), each [B, f_d, n_d, c_d]."""
        return self.encode_tokens(self.tokenize(z_high), rng=rng, stochastic=stochastic)
