"""3D Fourier band-splitting of latents into complementary low/high parts.

The transform runs over the (f, h, w) axes only; the channel axis is never
transformed and the mask is constant along it. Both FFT directions use
orthonormal scaling so energy bookkeeping (Parseval) is exact up to float
error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigurationError, NumericalIntegrityError

_IMAG_TOL = 1e-6


@dataclass
class FilterMask:
    P: torch.Tensor  # [c, f, h, w], values in [0, 1], Hermitian-symmetric
    cutoffs: tuple[float, float, float]
    kind: str = "brickwall"


@dataclass
class BandPair:
    z_low: torch.Tensor
    z_high: torch.Tensor


def _axis_freqs(n: int, dtype=torch.float64) -> torch.Tensor:
    # cycles/sample, matching FFT bin order: 0, 1/n, ..., -1/n
    return torch.fft.fftfreq(n, dtype=dtype)


def make_lowpass_mask(
    shape: tuple[int, int, int, int],
    cutoffs: tuple[float, float, float],
    kind: str = "brickwall",
) -> FilterMask:
    """Separable low-pass mask over centered frequency bins.

    shape: (c, f, h, w). cutoffs: per-axis fractions in (0, 1], in units of
    cycles/sample; a bin passes iff |freq| <= cutoff on every axis (brickwall)
    or gets the product of per-axis Gaussian rolloffs with half-power point at
    the cutoff (gaussian).
    """
    c, f, h, w = shape
    for name, k in zip(("f", "h", "w"), cutoffs):
        if not (0.0 < k <= 1.0):
            raise ConfigurationError(f"cutoff_{name} must lie in (0, 1], got {k}")
    axes = [_axis_freqs(f), _axis_freqs(h), _axis_freqs(w)]
    if kind == "brickwall":
        parts = [(fr.abs() <= k).double() for fr, k in zip(axes, cutoffs)]
    elif kind == "gaussian":
        # sigma chosen so the per-axis response is 0.5 at the cutoff
        sigmas = [k / math.sqrt(2.0 * math.log(2.0)) for k in cutoffs]
        parts = [torch.exp(-0.5 * (fr / s) ** 2) for fr, s in zip(axes, sigmas)]
    else:
        raise ConfigurationError(f"unknown mask kind {kind!r}")
    mask = parts[0][:, None, None] * parts[1][None, :, None] * parts[2][None, None, :]
    mask = mask.unsqueeze(0).expand(c, f, h, w).contiguous().float()
    return FilterMask(P=mask, cutoffs=tuple(cutoffs), kind=kind)


def split_bands(z: torch.Tensor, mask: FilterMask) -> BandPair:
    """Split z into z_low + z_high via the 3D spectrum; z may be [c,f,h,w] or [B,c,f,h,w]."""
    P = mask.P.to(dtype=torch.complex64 if z.dtype == torch.float32 else torch.complex128)
    if z.shape[-4:] != mask.P.shape:
        raise ConfigurationError(
            f"latent shape {tuple(z.shape)} does not match mask shape {tuple(mask.P.shape)}"
        )
    spectrum = torch.fft.fftn(z, dim=(-3, -2, -1), norm="ortho")
    low = torch.fft.ifftn(spectrum * P, dim=(-3, -2, -1), norm="ortho")
    high = torch.fft.ifftn(spectrum * (1.0 - P), dim=(-3, -2, -1), norm="ortho")
    residue = max(low.imag.abs().max().item(), high.imag.abs().max().item())
    if residue > _IMAG_TOL:
        raise NumericalIntegrityError(
            f"imaginary residue {residue:.3e} exceeds {_IMAG_TOL:.0e}; mask not Hermitian-symmetric?"
        )
    return BandPair(z_low=low.real.to(z.dtype), z_high=high.real.to(z.dtype))


def lowpass(z: torch.Tensor, mask: FilterMask) -> torch.Tensor:
    return split_bands(z, mask).z_low


def highpass(z: torch.Tensor, mask: FilterMask) -> torch.Tensor:
    return split_bands(z, mask).z_high
