"""Flow-matching conditional decoder.

The decoder predicts the velocity of the straight path between a clean latent
and Gaussian noise. Conditioning enters three ways: the first-frame content
latent is channel-concatenated with the interpolant, the two motion streams
are token-concatenated into alternating per-frame self-attention blocks (and
dropped again after each block), and the flow time modulates every block with
a learned shift/scale of the pre-norm activations. A temporal attention block
after each global/detailed pair ties the frames together.

Sign convention: the training target is v = z - eps, the time derivative of
the interpolant (1-t)z + t*eps is eps - z = -v, and sampling therefore steps
z <- z + v/steps while t runs from 1 down to 0.
"""

from __future__ import annotations

from typing import Callable

import torch
import torch.nn as nn

from .config import DecoderConfig, DetailedMotionConfig, GlobalMotionConfig
from .errors import ConfigurationError, NumericalIntegrityError
from .nn_core import (
    Attention,
    Mlp,
    TimeModulation,
    modulate,
    sinusoidal_embedding,
    timestep_embedding,
)

DECODE_MODES = ("full", "global_only", "detailed_only")


def noise_interp(z: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    """(1-t)*z + t*eps; t is a scalar or a per-sample [B] tensor."""
    if z.shape != eps.shape:
        raise ConfigurationError("z and eps shapes differ")
    t = torch.as_tensor(t, dtype=z.dtype, device=z.device)
    if torch.any(t < 0) or torch.any(t > 1):
        raise ConfigurationError("t must lie in [0, 1]")
    if t.dim() > 0:
        t = t.reshape(-1, *([1] * (z.dim() - 1)))
    return (1.0 - t) * z + t * eps


def velocity_target(z: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Ground-truth flow velocity z - eps."""
    if z.shape != eps.shape:
        raise ConfigurationError("z and eps shapes differ")
    return z - eps


def cfg_velocity(v_cond: torch.Tensor, v_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free guidance: v_uncond + w * (v_cond - v_uncond)."""
    if v_cond.shape != v_uncond.shape:
        raise ConfigurationError("velocity shapes differ")
    return v_uncond + w * (v_cond - v_uncond)


def euler_integrate(
    velocity_fn: Callable[[torch.Tensor, float], torch.Tensor],
    x_init: torch.Tensor,
    steps: int,
) -> torch.Tensor:
    """Forward-Euler from t=1 (x_init) to t=0 with uniform step 1/steps.

    velocity_fn(x, t) must return the velocity pointing from noise to data
    (v = z - eps), so each step adds v/steps.
    """
    if steps < 1:
        raise ConfigurationError(f"steps must be >= 1, got {steps}")
    x = x_init
    for k in range(steps):
        t = 1.0 - k / steps
        v = velocity_fn(x, t)
        x = x + v / steps
        if not torch.isfinite(x).all():
            raise NumericalIntegrityError(f"non-finite state during integration at step {k}")
    return x


class TemporalAlignBlock(nn.Module):
    """Self-attention along the frame axis, independently per token index.

    tokens [B, F, L, d] (or [F, L, d]) -> same shape; residual around a
    pre-norm attention, optionally time-modulated.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)

    def forward(self, x: torch.Tensor, mods=None) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        b, f, l, d = x.shape
        h = self.norm(x)
        if mods is not None:
            h = modulate(h, mods[0][0].unsqueeze(1), mods[0][1].unsqueeze(1))
        h = h.transpose(1, 2).reshape(b * l, f, d)  # token index into batch
        h = self.attn(h)
        h = h.reshape(b, l, f, d).transpose(1, 2)
        x = x + h
        return x.squeeze(0) if squeeze else x


class MotionInjectBlock(nn.Module):
    """Per-frame self-attention over [frame tokens ++ projected motion tokens].

    Motion slots are discarded after the attention; an MLP follows. Both
    sublayers are pre-norm with optional time modulation.
    """

    def __init__(self, dim: int, heads: int, motion_channels: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.motion_proj = nn.Linear(motion_channels, dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, motion: torch.Tensor, mods=None) -> torch.Tensor:
        # x [B, F, L, d]; motion [B, F, n, c_motion] time-aligned per frame
        b, f, l, d = x.shape
        h = self.norm1(x)
        if mods is not None:
            h = modulate(h, mods[0][0].unsqueeze(1), mods[0][1].unsqueeze(1))
        m = self.motion_proj(motion)
        seq = torch.cat([h, m], dim=2).reshape(b * f, l + m.shape[2], d)
        out = self.attn(seq).reshape(b, f, l + m.shape[2], d)[:, :, :l]
        x = x + out
        h = self.norm2(x)
        if mods is not None:
            h = modulate(h, mods[1][0].unsqueeze(1), mods[1][1].unsqueeze(1))
        return x + self.mlp(h)


class FlowDecoder(nn.Module):
    """Velocity predictor over latent frame grids.

    Layout: `layers` motion-injection blocks alternate between the global and
    detailed stream (global first); after every (global, detailed) pair a
    TemporalAlignBlock runs. Learned null tokens per stream stand in for
    dropped conditioning (classifier-free guidance and ablation decodes).
    """

    def __init__(
        self,
        latent_channels: int,
        latent_frames: int,
        latent_hw: tuple[int, int],
        g_cfg: GlobalMotionConfig,
        d_cfg: DetailedMotionConfig,
        cfg: DecoderConfig,
    ):
        super().__init__()
        cfg.validate()
        if g_cfg.f_g * 2 != latent_frames or d_cfg.f_d != latent_frames:
            raise ConfigurationError(
                f"motion time axes (f_g={g_cfg.f_g}, f_d={d_cfg.f_d}) inconsistent with "
                f"latent frames {latent_frames}"
            )
        self.cfg = cfg
        self.latent_channels = latent_channels
        self.latent_frames = latent_frames
        self.latent_hw = tuple(latent_hw)
        self.g_dims = (g_cfg.f_g, g_cfg.n_g, g_cfg.c_g)
        self.d_dims = (d_cfg.f_d, d_cfg.n_d, d_cfg.c_d)

        h, w = self.latent_hw
        width = cfg.width
        self.in_proj = nn.Linear(2 * latent_channels, width)
        pe = sinusoidal_embedding(torch.arange(h * w), width)
        fe = sinusoidal_embedding(torch.arange(latent_frames), width)
        self.register_buffer("spatial_pe", pe, persistent=False)
        self.register_buffer("frame_pe", fe, persistent=False)

        self.null_g = nn.Parameter(torch.zeros(g_cfg.f_g, g_cfg.n_g, g_cfg.c_g))
        self.null_d = nn.Parameter(torch.zeros(d_cfg.f_d, d_cfg.n_d, d_cfg.c_d))

        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, width), nn.SiLU(), nn.Linear(width, width)
        )

        blocks = []
        mods = []
        for i in range(cfg.layers):
            stream_channels = g_cfg.c_g if i % 2 == 0 else d_cfg.c_d
            blocks.append(MotionInjectBlock(width, cfg.heads, stream_channels, cfg.mlp_ratio))
            mods.append(TimeModulation(width, width, 2))
            if i % 2 == 1:
                blocks.append(TemporalAlignBlock(width, cfg.heads))
                mods.append(TimeModulation(width, width, 1))
        self.blocks = nn.ModuleList(blocks)
        self.block_mods = nn.ModuleList(mods)

        self.norm_out = nn.LayerNorm(width)
        self.out_proj = nn.Linear(width, latent_channels)

    def null_motion(self, batch: int) -> tuple[torch.Tensor, torch.Tensor]:
        return (
            self.null_g.unsqueeze(0).expand(batch, -1, -1, -1),
            self.null_d.unsqueeze(0).expand(batch, -1, -1, -1),
        )

    def forward(
        self,
        interp: torch.Tensor,
        content: torch.Tensor,
        u_g: torch.Tensor,
        u_d: torch.Tensor,
        t,
    ) -> torch.Tensor:
        """Predict the velocity for `interp` [B,c,f,h,w].

        content: [B,c,h,w] first-frame latent; u_g [B,f_g,n_g,c_g];
        u_d [B,f_d,n_d,c_d]; t scalar or [B].
        """
        if content is None:
            raise ConfigurationError("content latent is required")
        b, c, f, h, w = interp.shape
        if (c, f, (h, w)) != (self.latent_channels, self.latent_frames, self.latent_hw):
            raise ConfigurationError(
                f"interp shape {tuple(interp.shape)} inconsistent with decoder config"
            )
        if content.shape != (b, c, h, w):
            raise ConfigurationError(f"content shape {tuple(content.shape)} != {(b, c, h, w)}")

        t = torch.as_tensor(t, dtype=interp.dtype, device=interp.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        t_feat = self.time_mlp(timestep_embedding(t, self.cfg.time_dim))  # [B, width]

        x = torch.cat([interp, content.unsqueeze(2).expand(-1, -1, f, -1, -1)], dim=1)
        x = x.permute(0, 2, 3, 4, 1).reshape(b, f, h * w, 2 * c)
        x = self.in_proj(x)
        x = x + self.spatial_pe.to(x.dtype)[None, None] + self.frame_pe.to(x.dtype)[None, :, None]

        u_g_rep = u_g.repeat_interleave(2, dim=1)  # [B, f, n_g, c_g]
        inject_idx = 0
        for blk, mod in zip(self.blocks, self.block_mods):
            mods = mod(t_feat)
            if isinstance(blk, MotionInjectBlock):
                motion = u_g_rep if inject_idx % 2 == 0 else u_d
                x = blk(x, motion, mods=mods)
                inject_idx += 1
            else:
                x = blk(x, mods=mods)

        v = self.out_proj(self.norm_out(x))  # [B, f, hw, c]
        return v.reshape(b, f, h, w, c).permute(0, 4, 1, 2, 3)


def ode_sample(
    decoder: FlowDecoder,
    content: torch.Tensor,
    u_g: torch.Tensor | None,
    u_d: torch.Tensor | None,
    steps: int | None = None,
    rng: torch.Generator | None = None,
    guidance: float = 1.0,
    mode: str = "full",
    eps: torch.Tensor | None = None,
) -> torch.Tensor:
    """Integrate the learned velocity field from noise to a latent estimate.

    mode selects which motion streams condition the decode; excluded streams
    are replaced by the learned null tokens. guidance != 1 blends in an
    unconditional (all-null) pass via cfg_velocity.
    """
    if mode not in DECODE_MODES:
        raise ConfigurationError(f"mode must be one of {DECODE_MODES}, got {mode!r}")
    steps = decoder.cfg.infer_steps if steps is None else steps
    b = content.shape[0]
    null_g, null_d = decoder.null_motion(b)
    if mode in ("full", "global_only") and u_g is None:
        raise ConfigurationError(f"mode {mode!r} requires u_g")
    if mode in ("full", "detailed_only") and u_d is None:
        raise ConfigurationError(f"mode {mode!r} requires u_d")
    cond_g = u_g if mode in ("full", "global_only") else null_g
    cond_d = u_d if mode in ("full", "detailed_only") else null_d

    if eps is None:
        shape = (b, decoder.latent_channels, decoder.latent_frames, *decoder.latent_hw)
        eps = torch.empty(shape, dtype=content.dtype).normal_(generator=rng)

    def vel(x, t):
        v_cond = decoder(x, content, cond_g, cond_d, t)
        if guidance == 1.0:
            return v_cond
        if guidance == 0.0:
            return decoder(x, content, null_g, null_d, t)
        v_uncond = decoder(x, content, null_g, null_d, t)
        return cfg_velocity(v_cond, v_uncond, guidance)

    with torch.no_grad():
        return euler_integrate(vel, eps, steps)
