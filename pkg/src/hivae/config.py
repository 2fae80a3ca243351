"""Run configuration: nested dataclasses, JSON round-trip, dotted CLI overrides.

The on-disk form is a single JSON object whose top-level keys are the section
names (``codec``, ``spectral``, ``global``, ``detail``, ``decoder``, ``train``,
``gen``, ``data``) plus a top-level ``seed``. Every checkpoint embeds the full
serialized config, so a checkpoint alone is enough to rebuild the model.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigurationError


@dataclass
class CodecConfig:
    spatial_factor: int = 8
    temporal_factor: int = 1
    latent_channels: int = 16

    def validate(self):
        s = self.spatial_factor
        if s < 1 or (s & (s - 1)) != 0:
            raise ConfigurationError(f"spatial_factor must be a power of two, got {s}")
        if self.temporal_factor < 1:
            raise ConfigurationError("temporal_factor must be >= 1")
        if self.latent_channels < 1:
            raise ConfigurationError("latent_channels must be >= 1")


@dataclass
class SpectralConfig:
    cutoff_f: float = 0.25
    cutoff_h: float = 0.25
    cutoff_w: float = 0.25
    mask_kind: str = "brickwall"  # "brickwall" | "gaussian"

    def cutoffs(self) -> tuple[float, float, float]:
        return (self.cutoff_f, self.cutoff_h, self.cutoff_w)

    def validate(self):
        for name, k in zip(("cutoff_f", "cutoff_h", "cutoff_w"), self.cutoffs()):
            if not (0.0 < k <= 1.0):
                raise ConfigurationError(f"{name} must lie in (0, 1], got {k}")
        if self.mask_kind not in ("brickwall", "gaussian"):
            raise ConfigurationError(f"unknown mask_kind {self.mask_kind!r}")


@dataclass
class GlobalMotionConfig:
    f_g: int = 4  # half the pixel frame count
    n_g: int = 8
    c_g: int = 8
    layers: int = 4
    heads: int = 4
    mask_lo: float = 0.30
    mask_hi: float = 0.50

    def validate(self):
        if self.c_g % self.heads != 0:
            raise ConfigurationError(f"c_g={self.c_g} not divisible by heads={self.heads}")
        if not (0.0 <= self.mask_lo <= self.mask_hi < 1.0):
            raise ConfigurationError(
                f"mask range [{self.mask_lo}, {self.mask_hi}] must satisfy 0 <= lo <= hi < 1"
            )


@dataclass
class DetailedMotionConfig:
    f_d: int = 8  # pixel frame count
    n_d: int = 16
    c_d: int = 16
    layers: int = 4
    heads: int = 4

    def validate(self):
        if self.c_d % self.heads != 0:
            raise ConfigurationError(f"c_d={self.c_d} not divisible by heads={self.heads}")


@dataclass
class DecoderConfig:
    layers: int = 6
    heads: int = 4
    width: int = 96
    mlp_ratio: float = 2.0
    time_dim: int = 64
    cfg_drop_prob: float = 0.10
    cfg_weight: float = 5.0
    train_steps_T: int = 1000
    infer_steps: int = 20

    def validate(self):
        if self.infer_steps < 1:
            raise ConfigurationError("infer_steps must be >= 1")
        if self.cfg_weight < 0:
            raise ConfigurationError("cfg_weight must be >= 0")
        if self.width % self.heads != 0:
            raise ConfigurationError(f"width={self.width} not divisible by heads={self.heads}")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.99)
    warmup_steps: int = 200
    schedule: str = "cosine"
    lambda_kl: float = 0.001
    weight_decay: float = 0.0001
    grad_clip: float = 1.0
    batch_size: int = 4
    stage0_steps: int = 1500
    stage1_steps: int = 800
    stage2_steps: int = 800
    log_every: int = 25
    seed: int = 0

    def validate(self):
        if self.lambda_kl < 0:
            raise ConfigurationError("lambda_kl must be >= 0")
        for name in ("stage0_steps", "stage1_steps", "stage2_steps"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.warmup_steps > max(self.stage0_steps, self.stage1_steps, self.stage2_steps):
            raise ConfigurationError("warmup_steps exceeds every stage length")


@dataclass
class GenConfig:
    layers: int = 4
    width: int = 128
    heads: int = 4
    mlp_ratio: float = 2.0
    time_dim: int = 64
    c_m: int = 16
    class_embed_dim: int = 128
    num_classes: int = 2
    cfg_drop: float = 0.20
    cfg_weight: float = 5.0
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    warmup_steps: int = 50
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    train_steps: int = 600
    infer_steps: int = 20

    def validate(self):
        if self.width % self.heads != 0:
            raise ConfigurationError(f"width={self.width} not divisible by heads={self.heads}")
        if self.infer_steps < 1:
            raise ConfigurationError("infer_steps must be >= 1")


@dataclass
class DataConfig:
    size: int = 64
    frames: int = 8
    channels: int = 3
    fps: float = 8.0


_SECTIONS = {
    "codec": CodecConfig,
    "spectral": SpectralConfig,
    "global": GlobalMotionConfig,
    "detail": DetailedMotionConfig,
    "decoder": DecoderConfig,
    "train": TrainConfig,
    "gen": GenConfig,
    "data": DataConfig,
}

# dataclass attribute names ("global" is a keyword)
_ATTR_FOR_SECTION = {name: ("global_motion" if name == "global" else name) for name in _SECTIONS}


@dataclass
class RunConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    global_motion: GlobalMotionConfig = field(default_factory=GlobalMotionConfig)
    detail: DetailedMotionConfig = field(default_factory=DetailedMotionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0

    def validate(self):
        for section, attr in _ATTR_FOR_SECTION.items():
            sub = getattr(self, attr)
            if hasattr(sub, "validate"):
                sub.validate()
        frames = self.data.frames
        if frames % 2 != 0:
            raise ConfigurationError(f"frame count must be even, got {frames}")
        if self.global_motion.f_g * 2 != frames:
            raise ConfigurationError(
                f"global f_g={self.global_motion.f_g} must be half of frames={frames}"
            )
        if self.detail.f_d != frames:
            raise ConfigurationError(
                f"detail f_d={self.detail.f_d} must equal frames={frames}"
            )
        if self.codec.temporal_factor != 1 and frames % self.codec.temporal_factor != 0:
            raise ConfigurationError("frames not divisible by temporal_factor")
        return self

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        for section, attr in _ATTR_FOR_SECTION.items():
            out[section] = dataclasses.asdict(getattr(self, attr))
        out["seed"] = self.seed
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        kwargs: dict[str, Any] = {}
        for section, section_cls in _SECTIONS.items():
            sub = dict(d.get(section, {}))
            known = {f.name for f in dataclasses.fields(section_cls)}
            unknown = set(sub) - known
            if unknown:
                raise ConfigurationError(f"unknown keys in [{section}]: {sorted(unknown)}")
            # JSON has no tuples
            for f in dataclasses.fields(section_cls):
                if f.name in sub and isinstance(sub[f.name], list):
                    sub[f.name] = tuple(sub[f.name])
            kwargs[_ATTR_FOR_SECTION[section]] = section_cls(**sub)
        kwargs["seed"] = int(d.get("seed", 0))
        return cls(**kwargs)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def for_frames(self, frames: int) -> "RunConfig":
        """Copy with frame-coupled fields (f_g, f_d, data.frames) set for `frames`."""
        cfg = RunConfig.from_dict(self.to_dict())
        cfg.data.frames = frames
        cfg.global_motion.f_g = frames // 2
        cfg.detail.f_d = frames
        return cfg


def _coerce(raw: str, current: Any) -> Any:
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigurationError(f"cannot parse boolean from {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p for p in raw.strip("()[] ").split(",") if p]
        return tuple(type(current[0])(p) for p in parts)
    return raw


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply `section.key=value` strings (e.g. ``decoder.width=128``) in order."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        path, raw = item.split("=", 1)
        parts = path.split(".")
        if len(parts) == 1 and parts[0] == "seed":
            cfg.seed = int(raw)
            continue
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigurationError(f"unknown config key {path!r}")
        section = getattr(cfg, _ATTR_FOR_SECTION[parts[0]])
        if not hasattr(section, parts[1]):
            raise ConfigurationError(f"unknown config key {path!r}")
        current = getattr(section, parts[1])
        setattr(section, parts[1], _coerce(raw, current))
    return cfg


# Motion-latent size presets for 16-frame, 256x256 inputs. Values are
# (n_g, c_g, n_d, c_d); f_g/f_d follow from the frame count.
LATENT_PRESETS = {
    "small": (8, 4, 16, 8),
    "normal": (8, 8, 16, 16),
    "large": (8, 8, 16, 32),
}


def preset_config(name: str, frames: int = 16) -> RunConfig:
    if name not in LATENT_PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(LATENT_PRESETS)}")
    n_g, c_g, n_d, c_d = LATENT_PRESETS[name]
    cfg = RunConfig().for_frames(frames)
    cfg.global_motion.n_g = n_g
    cfg.global_motion.c_g = c_g
    cfg.detail.n_d = n_d
    cfg.detail.c_d = c_d
    return cfg
