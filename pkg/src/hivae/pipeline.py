"""Full model assembly and checkpoint plumbing.

A `HiVaeModel` owns the patch codec, the band-split mask, both motion
encoders, and the flow decoder, wired together from one `RunConfig`.
Checkpoints store every parameter as a named float32 array under the
namespaces ``codec.``, ``global.``, ``detail.``, ``decoder.`` with the full
config embedded, so a checkpoint alone rebuilds the model.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn as nn

from . import container
from .codec import PatchCodec
from .config import RunConfig
from .decoder import DECODE_MODES, FlowDecoder, ode_sample
from .errors import ConfigurationError
from .motion import (
    DetailedMotionEncoder,
    GlobalMotionEncoder,
    MotionLatent,
    SpatialMask,
    sample_spatial_mask,
)
from .spectral import BandPair, FilterMask, make_lowpass_mask, split_bands

NAMESPACES = ("codec", "global", "detail", "decoder")


class HiVaeModel(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        cfg.validate()
        self.run_cfg = cfg
        self.codec = PatchCodec(cfg.codec, channels=cfg.data.channels)
        self.global_encoder = GlobalMotionEncoder(cfg.codec.latent_channels, cfg.global_motion)
        self.detail_encoder = DetailedMotionEncoder(cfg.codec.latent_channels, cfg.detail)

        f = cfg.data.frames // cfg.codec.temporal_factor
        hw = cfg.data.size // cfg.codec.spatial_factor
        self.latent_shape = (cfg.codec.latent_channels, f, hw, hw)
        self.decoder = FlowDecoder(
            cfg.codec.latent_channels, f, (hw, hw), cfg.global_motion, cfg.detail, cfg.decoder
        )
        mask = make_lowpass_mask(self.latent_shape, cfg.spectral.cutoffs(), cfg.spectral.mask_kind)
        self.register_buffer("band_mask", mask.P, persistent=False)
        self._mask_meta = (mask.cutoffs, mask.kind)
        self.completed_stage = "none"

    @property
    def filter_mask(self) -> FilterMask:
        return FilterMask(P=self.band_mask, cutoffs=self._mask_meta[0], kind=self._mask_meta[1])

    def bands(self, z: torch.Tensor) -> BandPair:
        return split_bands(z, self.filter_mask)

    def sample_mask(self, rng: torch.Generator) -> SpatialMask:
        hw = self.latent_shape[2] * self.latent_shape[3]
        g = self.run_cfg.global_motion
        return sample_spatial_mask(hw, rng, lo=g.mask_lo, hi=g.mask_hi)

    def encode_motion(
        self,
        videos: torch.Tensor,
        mask: SpatialMask | None = None,
        rng: torch.Generator | None = None,
        stochastic: bool = False,
    ) -> tuple[MotionLatent, torch.Tensor]:
        """Video -> (motion latents, codec latent z)."""
        z = self.codec.encode(videos)
        bands = self.bands(z)
        u_g, mu_g, logvar_g = self.global_encoder(bands.z_low, mask=mask, rng=rng,
                                                  stochastic=stochastic)
        u_d, mu_d, logvar_d = self.detail_encoder(bands.z_high, rng=rng, stochastic=stochastic)
        latent = MotionLatent(u_g=u_g, u_d=u_d, mu_g=mu_g, logvar_g=logvar_g,
                              mu_d=mu_d, logvar_d=logvar_d)
        return latent, z

    @staticmethod
    def content_of(z: torch.Tensor) -> torch.Tensor:
        """First-frame slice of the codec latent."""
        return z[:, :, 0]

    def reconstruct(
        self,
        videos: torch.Tensor,
        steps: int | None = None,
        guidance: float = 1.0,
        mode: str = "full",
        rng: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode then flow-decode; returns (video_hat, z_hat)."""
        if mode not in DECODE_MODES:
            raise ConfigurationError(f"mode must be one of {DECODE_MODES}, got {mode!r}")
        with torch.no_grad():
            latent, z = self.encode_motion(videos, mask=None, stochastic=False)
            z_hat = ode_sample(
                self.decoder,
                self.content_of(z),
                latent.u_g,
                latent.u_d,
                steps=steps,
                rng=rng,
                guidance=guidance,
                mode=mode,
            )
            return self.codec.decode(z_hat), z_hat


def _module_for(model: HiVaeModel, namespace: str) -> nn.Module:
    return {
        "codec": model.codec,
        "global": model.global_encoder,
        "detail": model.detail_encoder,
        "decoder": model.decoder,
    }[namespace]


def model_arrays(model: HiVaeModel, namespaces=NAMESPACES) -> dict[str, np.ndarray]:
    """Flatten model parameters/buffers to named float32 arrays."""
    out: dict[str, np.ndarray] = {}
    for ns in namespaces:
        module = _module_for(model, ns)
        for key, value in module.state_dict().items():
            out[f"{ns}.{key}"] = value.detach().cpu().numpy().astype(np.float32)
    return out


def namespace_hash(model: HiVaeModel, namespace: str) -> str:
    """sha256 over the namespace's parameter bytes (sorted by key)."""
    arrays = model_arrays(model, namespaces=(namespace,))
    digest = hashlib.sha256()
    for key in sorted(arrays):
        digest.update(key.encode())
        digest.update(arrays[key].tobytes())
    return digest.hexdigest()


def save_model(path, model: HiVaeModel, stage: str, meta: dict | None = None):
    meta = dict(meta or {})
    meta["stage"] = stage
    container.save_checkpoint(path, model_arrays(model), model.run_cfg.to_dict(), meta)


def load_model(path) -> tuple[HiVaeModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, header)."""
    arrays, header = container.load_checkpoint(path)
    cfg = RunConfig.from_dict(header["config"])
    torch.manual_seed(cfg.seed)  # arbitrary init, fully overwritten below
    model = HiVaeModel(cfg)
    for ns in NAMESPACES:
        module = _module_for(model, ns)
        state = {}
        prefix = ns + "."
        for key, arr in arrays.items():
            if key.startswith(prefix):
                state[key[len(prefix):]] = torch.from_numpy(arr.copy())
        module.load_state_dict(state)
    model.completed_stage = header.get("meta", {}).get("stage", "none")
    return model, header
