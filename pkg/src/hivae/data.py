"""Synthetic clip generation, the canonical fixture set, tiling, frame-dir IO.

All videos are float32 tensors shaped [B, C, F, H, W] with values in [0, 1].
The synthetic scenes separate two kinds of movement: the whole canvas drifts
at an integer velocity (coarse scene motion, rendered as an exact roll), and
small blob sprites oscillate around drifting anchors (fast local motion).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError


@dataclass
class VideoTensor:
    data: torch.Tensor  # [B, C, F, H, W], float32, values in [0, 1]
    fps: float = 8.0


def validate_video(x: torch.Tensor, spatial_factor: int | None = None):
    if x.dim() != 5:
        raise ConfigurationError(f"video must be rank-5 [B,C,F,H,W], got shape {tuple(x.shape)}")
    b, c, f, h, w = x.shape
    if c not in (1, 3):
        raise ConfigurationError(f"channel count must be 1 or 3, got {c}")
    if f < 2:
        raise ConfigurationError(f"need at least 2 frames, got {f}")
    if spatial_factor is not None and (h % spatial_factor or w % spatial_factor):
        raise ConfigurationError(
            f"spatial dims ({h}, {w}) not divisible by factor {spatial_factor}"
        )


@dataclass
class SpriteSpec:
    size: int = 64
    frames: int = 8
    channels: int = 3
    drift: tuple[int, int] = (0, 0)  # (dy, dx) px/frame, integer for exact rolls
    n_sprites: int = 0
    osc_freq: float = 0.0  # cycles/frame, per-sprite base frequency
    osc_amp: float = 0.0  # px
    tex_freq: int = 2  # max grating cycles across the frame
    sprite_sigma: float = 3.0
    seed: int = 0
    fps: float = 8.0

    def validate(self):
        if self.size < 8 or self.frames < 2:
            raise ConfigurationError("size must be >= 8 and frames >= 2")
        if self.channels not in (1, 3):
            raise ConfigurationError("channels must be 1 or 3")
        if self.osc_freq < 0 or self.osc_freq > 0.5:
            raise ConfigurationError(f"osc_freq {self.osc_freq} above Nyquist (0.5 cycles/frame)")
        if self.osc_amp < 0 or self.osc_amp > self.size / 4:
            raise ConfigurationError("osc_amp must lie in [0, size/4]")
        if self.tex_freq < 1 or self.tex_freq >= self.size // 2:
            raise ConfigurationError("tex_freq must lie in [1, size/2)")
        if abs(self.drift[0]) >= self.size or abs(self.drift[1]) >= self.size:
            raise ConfigurationError("drift magnitude must stay below the frame size")


def _wrap(delta: np.ndarray, n: int) -> np.ndarray:
    # shortest signed displacement on a periodic axis of length n
    return (delta + n / 2) % n - n / 2


def synth_video(spec: SpriteSpec) -> VideoTensor:
    """Render a clip from `spec`; deterministic for a fixed seed.

    The background (plus per-sprite anchors) translates by ``drift`` per frame
    with periodic wrap, so with zero oscillation frame k is exactly frame 0
    rolled by k*drift.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, frames, ch = spec.size, spec.frames, spec.channels
    yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")

    base = np.zeros((ch, n, n))
    for c in range(ch):
        for _ in range(2):
            fy, fx = rng.integers(1, spec.tex_freq + 1, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            base[c] += np.sin(2 * np.pi * (fx * xx + fy * yy) / n + phase)
    base = 0.5 + 0.1 * base

    centers = rng.uniform(n * 0.15, n * 0.85, size=(spec.n_sprites, 2))
    colors = rng.uniform(0.25, 0.6, size=(spec.n_sprites, ch))
    directions = rng.uniform(-1.0, 1.0, size=(spec.n_sprites, 2))
    norms = np.maximum(np.linalg.norm(directions, axis=1, keepdims=True), 1e-9)
    directions = directions / norms
    freqs = spec.osc_freq * rng.uniform(0.75, 1.0, size=spec.n_sprites)
    phases = rng.uniform(0, 2 * np.pi, size=spec.n_sprites)

    dy, dx = spec.drift
    video = np.empty((ch, frames, n, n))
    for k in range(frames):
        frame = np.roll(base, (k * dy, k * dx), axis=(1, 2)).copy()
        for s in range(spec.n_sprites):
            osc = spec.osc_amp * np.sin(2 * np.pi * freqs[s] * k + phases[s])
            cy = centers[s, 0] + k * dy + osc * directions[s, 0]
            cx = centers[s, 1] + k * dx + osc * directions[s, 1]
            d2 = _wrap(yy - cy, n) ** 2 + _wrap(xx - cx, n) ** 2
            blob = np.exp(-d2 / (2.0 * spec.sprite_sigma**2))
            frame += colors[s][:, None, None] * blob[None]
        video[:, k] = frame

    data = torch.from_numpy(np.clip(video, 0.0, 1.0)).float().unsqueeze(0)
    return VideoTensor(data=data, fps=spec.fps)


# Canonical 4-clip suite: static scene, pure drift, pure oscillation, both.
FIXTURE_SPECS = (
    SpriteSpec(seed=11),
    SpriteSpec(drift=(0, 2), seed=12),
    SpriteSpec(n_sprites=3, osc_freq=0.375, osc_amp=5.0, seed=13),
    SpriteSpec(drift=(1, 1), n_sprites=3, osc_freq=0.375, osc_amp=5.0, seed=14),
)

FIXTURE_NAMES = ("static", "drift", "oscillation", "mixed")


def fixture_videos() -> torch.Tensor:
    """The 4-clip fixture set as one [4, 3, 8, 64, 64] tensor."""
    return torch.cat([synth_video(s).data for s in FIXTURE_SPECS], dim=0)


def tile_split(x: torch.Tensor, tile_hw: int) -> tuple[list[torch.Tensor], dict]:
    """Split [B,C,F,H,W] into non-overlapping tile_hw x tile_hw tiles.

    Returns (tiles in row-major order, layout) where layout records the grid
    needed by `tile_join`.
    """
    validate_video(x)
    b, c, f, h, w = x.shape
    if h % tile_hw or w % tile_hw:
        raise ConfigurationError(f"frame size ({h}, {w}) not divisible by tile size {tile_hw}")
    rows, cols = h // tile_hw, w // tile_hw
    tiles = []
    for r in range(rows):
        for q in range(cols):
            tiles.append(
                x[:, :, :, r * tile_hw:(r + 1) * tile_hw, q * tile_hw:(q + 1) * tile_hw].clone()
            )
    return tiles, {"rows": rows, "cols": cols, "tile_hw": tile_hw}


def tile_join(tiles: list[torch.Tensor], layout: dict) -> torch.Tensor:
    rows, cols, t = layout["rows"], layout["cols"], layout["tile_hw"]
    if len(tiles) != rows * cols:
        raise ConfigurationError(f"expected {rows * cols} tiles, got {len(tiles)}")
    b, c, f, _, _ = tiles[0].shape
    out = tiles[0].new_empty((b, c, f, rows * t, cols * t))
    for r in range(rows):
        for q in range(cols):
            out[:, :, :, r * t:(r + 1) * t, q * t:(q + 1) * t] = tiles[r * cols + q]
    return out


def read_frame_dir(path, fps: float = 8.0) -> VideoTensor:
    """Load a clip from a directory of per-frame images (sorted by filename)."""
    from PIL import Image

    names = sorted(
        f for f in os.listdir(path) if f.lower().endswith((".png", ".bmp", ".jpg", ".jpeg"))
    )
    if len(names) < 2:
        raise ConfigurationError(f"need at least 2 frame images in {path}, found {len(names)}")
    frames = []
    for name in names:
        img = np.asarray(Image.open(os.path.join(path, name)))
        if img.ndim == 2:
            img = img[:, :, None]
        frames.append(img[:, :, :3] if img.shape[2] >= 3 else img[:, :, :1])
    stack = np.stack(frames).astype(np.float32) / 255.0  # [F, H, W, C]
    data = torch.from_numpy(stack).permute(3, 0, 1, 2).unsqueeze(0).contiguous()
    return VideoTensor(data=data, fps=fps)


def write_frame_dir(path, video: VideoTensor):
    """Write each frame of a single-clip video as a PNG."""
    from PIL import Image

    os.makedirs(path, exist_ok=True)
    x = video.data
    if x.shape[0] != 1:
        raise ConfigurationError("write_frame_dir expects a single clip (B=1)")
    arr = (x[0].clamp(0, 1) * 255.0).round().byte().permute(1, 2, 3, 0).cpu().numpy()
    for k in range(arr.shape[0]):
        frame = arr[k]
        if frame.shape[2] == 1:
            frame = frame[:, :, 0]
        Image.fromarray(frame).save(os.path.join(path, f"frame_{k:04d}.png"))
