"""Two-stage training protocol.

Stage 0 fits the patch codec (pixel MSE) and freezes it afterwards. Stage 1
trains the global encoder plus decoder with flow matching against low-passed
latent targets (the "easy", blurred version of the clip), spatial masking
active and the detailed stream pinned to its null tokens. Stage 2 freezes the
global encoder bitwise and trains the detailed encoder plus decoder against
full-band targets. A single-stage joint trainer exists as the ablation
baseline.

Per step the logged total loss is exactly fm_loss + lambda_kl * kl_loss.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import torch

from .codec import pretrain_codec
from .config import TrainConfig
from .decoder import noise_interp
from .errors import ConfigurationError, TrainingDivergedError
from .pipeline import HiVaeModel

STAGE0, STAGE1, STAGE2 = "stage0_codec", "stage1_global", "stage2_full"
STAGE_JOINT = "joint_onestage"


def kl_loss(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Mean over elements of KL(N(mu, e^logvar) || N(0, 1))."""
    if mu.shape != logvar.shape:
        raise ConfigurationError("mu and logvar shapes differ")
    return 0.5 * torch.mean(mu**2 + torch.exp(logvar) - 1.0 - logvar)


def fm_loss(v_hat: torch.Tensor, z: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the predicted velocity and z - eps."""
    if not (v_hat.shape == z.shape == eps.shape):
        raise ConfigurationError("velocity/latent shapes differ")
    return torch.mean((v_hat - (z - eps)) ** 2)


def lr_at(step: int, total_steps: int, base_lr: float, warmup: int) -> float:
    """Linear warmup from base_lr/warmup to base_lr, then cosine decay to 0."""
    if warmup > 0 and step <= warmup:
        return base_lr * max(1, step) / warmup
    span = max(total_steps - warmup, 1)
    frac = min(max(step - warmup, 0) / span, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def smoothed(values: list[float], window: int = 50) -> list[float]:
    """Trailing-mean smoothing used for progress checks."""
    out = []
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out.append(sum(values[lo:i + 1]) / (i + 1 - lo))
    return out


@dataclass
class TrainResult:
    stage: str
    history: list[dict] = field(default_factory=list)
    rng_state_hex: str = ""

    def losses(self) -> list[float]:
        return [row["loss"] for row in self.history]

    def final_smoothed_loss(self, window: int = 50) -> float:
        return smoothed(self.losses(), window)[-1]


class _CsvLog:
    FIELDS = ("step", "stage", "fm_loss", "kl_loss", "lr", "wall_time")

    def __init__(self, path):
        self.fh = open(path, "a", newline="") if path else None
        if self.fh is not None and self.fh.tell() == 0:
            csv.writer(self.fh).writerow(self.FIELDS)

    def write(self, row: dict):
        if self.fh is not None:
            csv.writer(self.fh).writerow([row[k] for k in self.FIELDS])

    def close(self):
        if self.fh is not None:
            self.fh.close()


def train_stage0(model: HiVaeModel, videos: torch.Tensor, cfg: TrainConfig,
                 log_path=None) -> TrainResult:
    """Codec pretraining; freezes the codec when done."""
    log = _CsvLog(log_path)
    start = time.time()
    history: list[dict] = []

    def hook(step, loss):
        row = {"step": step, "stage": STAGE0, "fm_loss": loss, "kl_loss": 0.0,
               "lr": cfg.lr, "wall_time": time.time() - start, "loss": loss}
        history.append(row)
        log.write(row)

    try:
        pretrain_codec(model.codec, videos, steps=cfg.stage0_steps, lr=cfg.lr,
                       batch_size=cfg.batch_size, seed=cfg.seed, log_hook=hook)
    finally:
        log.close()
    for p in model.codec.parameters():
        p.requires_grad_(False)
    model.completed_stage = STAGE0
    return TrainResult(stage=STAGE0, history=history)


def _set_trainable(model: HiVaeModel, train_global: bool, train_detail: bool):
    for p in model.codec.parameters():
        p.requires_grad_(False)
    for p in model.global_encoder.parameters():
        p.requires_grad_(train_global)
    for p in model.detail_encoder.parameters():
        p.requires_grad_(train_detail)
    for p in model.decoder.parameters():
        p.requires_grad_(True)


def _flow_training(
    model: HiVaeModel,
    videos: torch.Tensor,
    cfg: TrainConfig,
    *,
    stage: str,
    steps: int,
    train_global: bool,
    train_detail: bool,
    lowpass_targets: bool,
    mask_active: bool,
    detail_active: bool,
    seed_salt: int,
    log_path=None,
) -> TrainResult:
    _set_trainable(model, train_global, train_detail)
    gen = torch.Generator().manual_seed(cfg.seed * 9973 + seed_salt)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)

    with torch.no_grad():
        z_all = model.codec.encode(videos)
        bands = model.bands(z_all)
    n = videos.shape[0]
    drop_p = model.run_cfg.decoder.cfg_drop_prob
    lam = cfg.lambda_kl

    log = _CsvLog(log_path)
    start = time.time()
    history: list[dict] = []
    try:
        for step in range(steps):
            lr = lr_at(step, steps, cfg.lr, cfg.warmup_steps)
            for group in opt.param_groups:
                group["lr"] = lr

            idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=gen)
            z_b, z_low_b, z_high_b = z_all[idx], bands.z_low[idx], bands.z_high[idx]
            b = z_b.shape[0]
            target = z_low_b if lowpass_targets else z_b
            content = model.content_of(z_b)

            mask = model.sample_mask(gen) if mask_active else None
            if train_global:
                u_g, mu_g, logvar_g = model.global_encoder(
                    z_low_b, mask=mask, rng=gen, stochastic=True
                )
            else:
                with torch.no_grad():
                    u_g, mu_g, logvar_g = model.global_encoder(z_low_b, mask=None,
                                                               stochastic=False)
            kl = kl_loss(mu_g, logvar_g)
            null_g, null_d = model.decoder.null_motion(b)
            if detail_active:
                u_d, mu_d, logvar_d = model.detail_encoder(z_high_b, rng=gen, stochastic=True)
                kl = kl + kl_loss(mu_d, logvar_d)
            else:
                u_d = null_d

            drop = (torch.rand(b, generator=gen) < drop_p).reshape(b, 1, 1, 1)
            u_g_eff = torch.where(drop, null_g, u_g)
            u_d_eff = torch.where(drop, null_d, u_d) if detail_active else u_d

            t = torch.rand(b, generator=gen)
            eps = torch.empty_like(target).normal_(generator=gen)
            interp = noise_interp(target, eps, t)
            v_hat = model.decoder(interp, content, u_g_eff, u_d_eff, t)

            fm = fm_loss(v_hat, target, eps)
            loss = fm + lam * kl
            if not torch.isfinite(loss):
                raise TrainingDivergedError(step)

            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()

            row = {"step": step, "stage": stage, "fm_loss": fm.item(),
                   "kl_loss": kl.item(), "lr": lr, "wall_time": time.time() - start,
                   "loss": loss.item()}
            history.append(row)
            log.write(row)
    finally:
        log.close()

    state_hex = gen.get_state().numpy().tobytes().hex()
    model.completed_stage = stage
    return TrainResult(stage=stage, history=history, rng_state_hex=state_hex)


def _require_stage(model: HiVaeModel, wanted: tuple[str, ...], about: str):
    stage = getattr(model, "completed_stage", None)
    if stage not in wanted:
        raise ConfigurationError(
            f"{about} requires a model at stage {wanted}, got {stage!r}"
        )


def train_stage1(model: HiVaeModel, videos: torch.Tensor, cfg: TrainConfig,
                 log_path=None) -> TrainResult:
    """Global path on low-passed targets; detailed stream held at null."""
    _require_stage(model, (STAGE0, STAGE1, STAGE2, STAGE_JOINT), "stage 1")
    return _flow_training(
        model, videos, cfg, stage=STAGE1, steps=cfg.stage1_steps,
        train_global=True, train_detail=False, lowpass_targets=True,
        mask_active=True, detail_active=False, seed_salt=1, log_path=log_path,
    )


def train_stage2(model: HiVaeModel, videos: torch.Tensor, cfg: TrainConfig,
                 log_path=None) -> TrainResult:
    """Detailed path on full-band targets with the global encoder frozen."""
    _require_stage(model, (STAGE1,), "stage 2")
    return _flow_training(
        model, videos, cfg, stage=STAGE2, steps=cfg.stage2_steps,
        train_global=False, train_detail=True, lowpass_targets=False,
        mask_active=False, detail_active=True, seed_salt=2, log_path=log_path,
    )


def train_joint(model: HiVaeModel, videos: torch.Tensor, cfg: TrainConfig,
                steps: int | None = None, log_path=None) -> TrainResult:
    """Single-stage baseline: everything trains at once on full-band targets."""
    _require_stage(model, (STAGE0,), "joint training")
    total = steps if steps is not None else cfg.stage1_steps + cfg.stage2_steps
    return _flow_training(
        model, videos, cfg, stage=STAGE_JOINT, steps=total,
        train_global=True, train_detail=True, lowpass_targets=False,
        mask_active=True, detail_active=True, seed_salt=3, log_path=log_path,
    )
