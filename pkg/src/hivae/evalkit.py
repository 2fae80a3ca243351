"""Reconstruction metrics, compression-rate accounting, spectral analysis,
and the analytic transformer cost counter."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError
from .spectral import make_lowpass_mask


def psnr(x: torch.Tensor, x_hat: torch.Tensor, peak: float = 1.0) -> float:
    """10 * log10(peak^2 / MSE); +inf when the inputs are identical."""
    if x.shape != x_hat.shape:
        raise ConfigurationError("psnr inputs differ in shape")
    mse = torch.mean((x.double() - x_hat.double()) ** 2).item()
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(peak**2 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(x: torch.Tensor, x_hat: torch.Tensor, k1: float = 0.01, k2: float = 0.03,
         window: int = 11, sigma: float = 1.5) -> float:
    """Mean local structural similarity over frames.

    Inputs [B,C,F,H,W] in [0,1]; channels are averaged to grayscale first.
    The Gaussian window shrinks to the largest odd size that fits when a
    frame is smaller than 11 px.
    """
    if x.shape != x_hat.shape:
        raise ConfigurationError("ssim inputs differ in shape")
    a = x.double().mean(dim=1).reshape(-1, x.shape[-2], x.shape[-1]).numpy()
    b = x_hat.double().mean(dim=1).reshape(-1, x.shape[-2], x.shape[-1]).numpy()
    h, w = a.shape[-2:]
    win = min(window, h, w)
    if win % 2 == 0:
        win -= 1
    if win < 2:
        raise ConfigurationError("frames too small for ssim")
    kernel = _gaussian_window(win, sigma)

    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    vals = []
    for xa, xb in zip(a, b):
        pa = np.lib.stride_tricks.sliding_window_view(xa, (win, win))
        pb = np.lib.stride_tricks.sliding_window_view(xb, (win, win))
        mu_a = np.tensordot(pa, kernel, axes=([2, 3], [0, 1]))
        mu_b = np.tensordot(pb, kernel, axes=([2, 3], [0, 1]))
        ex2_a = np.tensordot(pa * pa, kernel, axes=([2, 3], [0, 1]))
        ex2_b = np.tensordot(pb * pb, kernel, axes=([2, 3], [0, 1]))
        ex_ab = np.tensordot(pa * pb, kernel, axes=([2, 3], [0, 1]))
        var_a = ex2_a - mu_a**2
        var_b = ex2_b - mu_b**2
        cov = ex_ab - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class CompressionReport:
    latent_dims: int
    video_dims: int
    rate_percent: float  # exact ratio * 100

    def rendered(self) -> str:
        """Two-decimal percentage, truncated toward zero (matching the
        convention the reference rate tables follow)."""
        hundredths = (self.latent_dims * 10000) // self.video_dims
        return f"{hundredths // 100}.{hundredths % 100:02d}"


def compression_rate(latent_element_count: int, c: int, f: int, h: int, w: int) -> CompressionReport:
    """Latent element count over video element count as a percentage."""
    for name, v in (("latent", latent_element_count), ("C", c), ("F", f), ("H", h), ("W", w)):
        if v < 1:
            raise ConfigurationError(f"{name} must be a positive integer, got {v}")
    video = c * f * h * w
    return CompressionReport(
        latent_dims=latent_element_count,
        video_dims=video,
        rate_percent=100.0 * latent_element_count / video,
    )


def spectral_energy_ratio(x: torch.Tensor, cutoffs: tuple[float, float, float]) -> float:
    """Fraction of 3D-spectrum energy outside the low band; 0 for constants.

    x: [B,C,F,H,W] (or [C,F,H,W]); the DC bin always counts as low band.
    """
    if x.dim() == 4:
        x = x.unsqueeze(0)
    b, c, f, h, w = x.shape
    mask = make_lowpass_mask((c, f, h, w), cutoffs, kind="brickwall")
    spectrum = torch.fft.fftn(x.double(), dim=(-3, -2, -1), norm="ortho")
    power = spectrum.real**2 + spectrum.imag**2
    p = mask.P.double()
    total = power.sum().item()
    if total == 0.0:
        return 0.0
    high = (power * (1.0 - p)).sum().item()
    return high / total


@dataclass
class DitCostConfig:
    layers: int = 8
    heads: int = 8
    hidden: int = 512
    ffn: int = 2048


def flops_and_memory(tokens: int, cfg: DitCostConfig = DitCostConfig()) -> tuple[int, int]:
    """Analytic single-sample cost of a transformer over `tokens` tokens.

    FLOPs per layer: attention projections 4*L*d^2, attention matmuls
    2*L^2*d, feed-forward 2*L*d*d_ff*2. Memory is counted in elements:
    parameters (4*d^2 + 2*d*d_ff per layer) plus activations
    (2*L*d + L*d_ff + heads*L^2 per layer).
    """
    if tokens < 0 or cfg.layers < 0:
        raise ConfigurationError("token and layer counts must be >= 0")
    L, d, d_ff = tokens, cfg.hidden, cfg.ffn
    attn = 4 * L * d * d + 2 * L * L * d
    ffn = 2 * L * d * d_ff * 2
    flops = cfg.layers * (attn + ffn)
    params = cfg.layers * (4 * d * d + 2 * d * d_ff)
    acts = cfg.layers * (2 * L * d + L * d_ff + cfg.heads * L * L)
    return flops, params + acts
