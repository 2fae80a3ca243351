"""Patch autoencoder between pixel videos and the working latent space.

encode: non-overlapping (temporal_factor x s x s) patches -> linear map to
`latent_channels`; decode is the transposed arrangement. Latents are
standardized by a global scalar mean/std fitted during stage-0 training and
stored with the parameters, so downstream flow matching sees roughly
unit-scale inputs.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import CodecConfig
from .data import validate_video
from .errors import ConfigurationError, TrainingDivergedError


class PatchCodec(nn.Module):
    def __init__(self, cfg: CodecConfig, channels: int = 3):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.channels = channels
        patch_dim = channels * cfg.temporal_factor * cfg.spatial_factor**2
        self.to_latent = nn.Linear(patch_dim, cfg.latent_channels)
        self.to_pixels = nn.Linear(cfg.latent_channels, patch_dim)
        # global latent standardization, fitted after stage 0
        self.register_buffer("latent_mean", torch.zeros(()))
        self.register_buffer("latent_std", torch.ones(()))

    def _check_encode_shape(self, x: torch.Tensor):
        validate_video(x, spatial_factor=self.cfg.spatial_factor)
        b, c, f, h, w = x.shape
        if c != self.channels:
            raise ConfigurationError(f"expected {self.channels} channels, got {c}")
        if f % self.cfg.temporal_factor:
            raise ConfigurationError(
                f"frame count {f} not divisible by temporal_factor {self.cfg.temporal_factor}"
            )

    def _patchify(self, x: torch.Tensor) -> torch.Tensor:
        # [B,C,F,H,W] -> [B, f, h, w, C*tf*s*s]
        s, tf = self.cfg.spatial_factor, self.cfg.temporal_factor
        b, c, f, h, w = x.shape
        x = x.reshape(b, c, f // tf, tf, h // s, s, w // s, s)
        x = x.permute(0, 2, 4, 6, 1, 3, 5, 7)
        return x.reshape(b, f // tf, h // s, w // s, c * tf * s * s)

    def _unpatchify(self, p: torch.Tensor, pixel_shape) -> torch.Tensor:
        s, tf = self.cfg.spatial_factor, self.cfg.temporal_factor
        b, c, f, h, w = pixel_shape
        p = p.reshape(b, f // tf, h // s, w // s, c, tf, s, s)
        p = p.permute(0, 4, 1, 5, 2, 6, 3, 7)
        return p.reshape(b, c, f, h, w)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """[B,C,F,H,W] pixels in [0,1] -> standardized latent [B,c,f,h,w]."""
        self._check_encode_shape(x)
        z = self.to_latent(self._patchify(x))  # [B, f, h, w, c]
        z = z.permute(0, 4, 1, 2, 3)
        return (z - self.latent_mean) / self.latent_std

    def decode(self, z: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        """Standardized latent [B,c,f,h,w] -> pixels [B,C,F,H,W], clamped to [0,1]."""
        if z.dim() != 5 or z.shape[1] != self.cfg.latent_channels:
            raise ConfigurationError(
                f"latent shape {tuple(z.shape)} inconsistent with latent_channels="
                f"{self.cfg.latent_channels}"
            )
        s, tf = self.cfg.spatial_factor, self.cfg.temporal_factor
        b, c, f, h, w = z.shape
        pixel_shape = (b, self.channels, f * tf, h * s, w * s)
        z = z * self.latent_std + self.latent_mean
        p = self.to_pixels(z.permute(0, 2, 3, 4, 1))
        x = self._unpatchify(p, pixel_shape)
        return x.clamp(0.0, 1.0) if clamp else x

    def fit_latent_stats(self, videos: torch.Tensor):
        """Set the scalar standardization from raw (pre-normalization) latents."""
        with torch.no_grad():
            self.latent_mean.zero_()
            self.latent_std.fill_(1.0)
            z = self.encode(videos)
            self.latent_mean.copy_(z.mean())
            self.latent_std.copy_(z.std().clamp_min(1e-6))


def encode_frames(x: torch.Tensor, codec: PatchCodec) -> torch.Tensor:
    return codec.encode(x)


def decode_frames(z: torch.Tensor, codec: PatchCodec) -> torch.Tensor:
    return codec.decode(z)


def pretrain_codec(
    codec: PatchCodec,
    videos: torch.Tensor,
    steps: int,
    lr: float = 1e-4,
    batch_size: int = 4,
    seed: int = 0,
    log_hook=None,
) -> list[float]:
    """Stage-0 reconstruction training (pixel MSE). Returns the loss history.

    After the loop the latent standardization stats are refitted on `videos`.
    """
    if steps < 1:
        raise ConfigurationError(f"steps must be >= 1, got {steps}")
    validate_video(videos, spatial_factor=codec.cfg.spatial_factor)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    n = videos.shape[0]
    history: list[float] = []
    for step in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        batch = videos[idx]
        recon = codec.decode(codec.encode(batch), clamp=False)
        loss = torch.mean((recon - batch) ** 2)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
        if log_hook is not None:
            log_hook(step, loss.item())
    codec.fit_latent_stats(videos)
    return history
