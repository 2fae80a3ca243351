"""Class-conditional motion generation over packed motion latents.

The two motion streams are projected to a shared channel width with fixed
seeded orthonormal maps, standardized by per-stream scalar statistics fitted
on the training set, time-aligned (the global stream is repeated 2x along
time), and concatenated along the token axis into m [f, n_g + n_d, c_m]. A
small transformer learns the straight-path velocity field over m with a class
embedding injected by cross-attention; sampling runs Euler steps from noise
with classifier-free guidance and unpacks back to (u_g, u_d).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import GenConfig
from .decoder import cfg_velocity, euler_integrate, noise_interp
from .errors import ConfigurationError, TrainingDivergedError
from .nn_core import (
    Attention,
    Mlp,
    TimeModulation,
    modulate,
    sinusoidal_embedding,
    timestep_embedding,
)
from .training import lr_at


@dataclass
class PackParams:
    """Fixed projections plus normalization stats for motion packing."""

    w_g: torch.Tensor  # [c_g, c_m], orthonormal rows
    w_d: torch.Tensor  # [c_d, c_m], orthonormal rows
    mean_g: float
    std_g: float
    mean_d: float
    std_d: float
    c_m: int

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "pack.w_g": self.w_g.numpy(),
            "pack.w_d": self.w_d.numpy(),
            "pack.stats": np.array(
                [self.mean_g, self.std_g, self.mean_d, self.std_d], dtype=np.float32
            ),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "PackParams":
        stats = arrays["pack.stats"]
        w_g = torch.from_numpy(arrays["pack.w_g"].copy())
        return cls(
            w_g=w_g,
            w_d=torch.from_numpy(arrays["pack.w_d"].copy()),
            mean_g=float(stats[0]),
            std_g=float(stats[1]),
            mean_d=float(stats[2]),
            std_d=float(stats[3]),
            c_m=w_g.shape[1],
        )


def _orthonormal_rows(c_in: int, c_out: int, gen: torch.Generator) -> torch.Tensor:
    if c_out < c_in:
        raise ConfigurationError(
            f"packed channel width {c_out} must be >= stream channels {c_in}"
        )
    a = torch.randn(c_out, c_in, generator=gen, dtype=torch.float64)
    q, _ = torch.linalg.qr(a)
    return q.T.contiguous().float()  # [c_in, c_out], rows orthonormal


def fit_pack(u_g: torch.Tensor, u_d: torch.Tensor, c_m: int, seed: int = 0) -> PackParams:
    """Build projections and fit the per-stream scalar stats on a dataset.

    u_g [N, f_g, n_g, c_g], u_d [N, f_d, n_d, c_d].
    """
    gen = torch.Generator().manual_seed(seed)
    w_g = _orthonormal_rows(u_g.shape[-1], c_m, gen)
    w_d = _orthonormal_rows(u_d.shape[-1], c_m, gen)
    pg = u_g @ w_g
    pd = u_d @ w_d
    return PackParams(
        w_g=w_g,
        w_d=w_d,
        mean_g=pg.mean().item(),
        std_g=max(pg.std().item(), 1e-6),
        mean_d=pd.mean().item(),
        std_d=max(pd.std().item(), 1e-6),
        c_m=c_m,
    )


def pack_motion(u_g: torch.Tensor, u_d: torch.Tensor, pp: PackParams) -> torch.Tensor:
    """(u_g [.., f_g, n_g, c_g], u_d [.., f_d, n_d, c_d]) -> m [.., f_d, n_g+n_d, c_m]."""
    if u_d.shape[-3] != 2 * u_g.shape[-3]:
        raise ConfigurationError(
            f"stream time axes mismatch: f_d={u_d.shape[-3]} must equal 2*f_g={2 * u_g.shape[-3]}"
        )
    g = ((u_g @ pp.w_g) - pp.mean_g) / pp.std_g
    d = ((u_d @ pp.w_d) - pp.mean_d) / pp.std_d
    g = g.repeat_interleave(2, dim=-3)  # align time to f_d
    return torch.cat([g, d], dim=-2)


def unpack_motion(m: torch.Tensor, pp: PackParams, n_g: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Inverse of pack_motion; paired time copies of the global stream are averaged."""
    g, d = m[..., :n_g, :], m[..., n_g:, :]
    f_d = g.shape[-3]
    g = g.unflatten(-3, (f_d // 2, 2)).mean(dim=-3)
    g = g * pp.std_g + pp.mean_g
    d = d * pp.std_d + pp.mean_d
    return g @ pp.w_g.T, d @ pp.w_d.T


class GeneratorBlock(nn.Module):
    """Token self-attention per frame, class cross-attention, temporal
    self-attention, then an MLP; all pre-norm with time modulation."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn_tokens = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.attn_class = Attention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.attn_time = Attention(dim, heads)
        self.norm4 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        self.mods = TimeModulation(dim, dim, 4)

    def forward(self, x: torch.Tensor, class_feat: torch.Tensor, t_feat: torch.Tensor):
        # x [B, f, n, d]; class_feat [B, 1, d]; t_feat [B, d]
        b, f, n, d = x.shape
        mods = self.mods(t_feat)

        h = modulate(self.norm1(x), mods[0][0].unsqueeze(1), mods[0][1].unsqueeze(1))
        x = x + self.attn_tokens(h.reshape(b * f, n, d)).reshape(b, f, n, d)

        h = modulate(self.norm2(x), mods[1][0].unsqueeze(1), mods[1][1].unsqueeze(1))
        x = x + self.attn_class(h.reshape(b, f * n, d), class_feat).reshape(b, f, n, d)

        h = modulate(self.norm3(x), mods[2][0].unsqueeze(1), mods[2][1].unsqueeze(1))
        h = h.transpose(1, 2).reshape(b * n, f, d)
        x = x + self.attn_time(h).reshape(b, n, f, d).transpose(1, 2)

        h = modulate(self.norm4(x), mods[3][0].unsqueeze(1), mods[3][1].unsqueeze(1))
        return x + self.mlp(h)


class MotionGenerator(nn.Module):
    def __init__(self, frames: int, tokens: int, cfg: GenConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.frames = frames
        self.tokens = tokens
        w = cfg.width
        self.in_proj = nn.Linear(cfg.c_m, w)
        self.class_embed = nn.Embedding(cfg.num_classes, cfg.class_embed_dim)
        self.null_class = nn.Parameter(torch.zeros(cfg.class_embed_dim))
        self.class_proj = nn.Linear(cfg.class_embed_dim, w)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, w), nn.SiLU(), nn.Linear(w, w))
        fe = sinusoidal_embedding(torch.arange(frames), w)
        te = sinusoidal_embedding(torch.arange(tokens), w)
        self.register_buffer("frame_pe", fe, persistent=False)
        self.register_buffer("token_pe", te, persistent=False)
        self.blocks = nn.ModuleList(
            GeneratorBlock(w, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers)
        )
        self.norm_out = nn.LayerNorm(w)
        self.out_proj = nn.Linear(w, cfg.c_m)

    def class_feature(self, class_id: torch.Tensor | None, batch: int) -> torch.Tensor:
        """Embed class ids; None selects the learned null embedding."""
        if class_id is None:
            emb = self.null_class.unsqueeze(0).expand(batch, -1)
        else:
            emb = self.class_embed(class_id)
        return self.class_proj(emb).unsqueeze(1)  # [B, 1, w]

    def forward(self, m_t: torch.Tensor, class_feat: torch.Tensor, t) -> torch.Tensor:
        """Velocity prediction for the packed-motion interpolant [B, f, n, c_m]."""
        b, f, n, _ = m_t.shape
        if (f, n) != (self.frames, self.tokens):
            raise ConfigurationError(
                f"packed motion grid {(f, n)} != configured {(self.frames, self.tokens)}"
            )
        t = torch.as_tensor(t, dtype=m_t.dtype).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        t_feat = self.time_mlp(timestep_embedding(t, self.cfg.time_dim))
        x = self.in_proj(m_t)
        x = x + self.frame_pe.to(x.dtype)[None, :, None] + self.token_pe.to(x.dtype)[None, None]
        for blk in self.blocks:
            x = blk(x, class_feat, t_feat)
        return self.out_proj(self.norm_out(x))


def gen_train(
    gen_model: MotionGenerator,
    dataset_m: torch.Tensor,
    class_ids: torch.Tensor,
    cfg: GenConfig,
    batch_size: int = 8,
    seed: int = 0,
    log_hook=None,
) -> list[float]:
    """Rectified-flow training over packed motions; returns the loss history."""
    if dataset_m.shape[0] != class_ids.shape[0]:
        raise ConfigurationError("dataset and class id counts differ")
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(
        gen_model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    )
    n = dataset_m.shape[0]
    history: list[float] = []
    for step in range(cfg.train_steps):
        lr = lr_at(step, cfg.train_steps, cfg.lr, cfg.warmup_steps)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        m = dataset_m[idx]
        b = m.shape[0]
        ids = class_ids[idx]
        drop = torch.rand(b, generator=gen) < cfg.cfg_drop
        cond = gen_model.class_feature(ids, b)
        null = gen_model.class_feature(None, b)
        class_feat = torch.where(drop.reshape(b, 1, 1), null, cond)

        t = torch.rand(b, generator=gen)
        eps = torch.empty_like(m).normal_(generator=gen)
        interp = noise_interp(m, eps, t)
        v_hat = gen_model(interp, class_feat, t)
        loss = torch.mean((v_hat - (m - eps)) ** 2)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(step)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(gen_model.parameters(), cfg.grad_clip)
        opt.step()
        history.append(loss.item())
        if log_hook is not None:
            log_hook(step, loss.item())
    return history


def gen_sample(
    gen_model: MotionGenerator,
    class_id: int | None,
    steps: int | None = None,
    guidance: float | None = None,
    rng: torch.Generator | None = None,
    batch: int = 1,
) -> torch.Tensor:
    """Sample packed motion for a class (None = unconditional)."""
    cfg = gen_model.cfg
    steps = cfg.infer_steps if steps is None else steps
    w = cfg.cfg_weight if guidance is None else guidance
    ids = None if class_id is None else torch.full((batch,), class_id, dtype=torch.long)
    cond = gen_model.class_feature(ids, batch)
    null = gen_model.class_feature(None, batch)

    def vel(x, t):
        if w == 0.0 or class_id is None:
            return gen_model(x, null, t)
        v_cond = gen_model(x, cond, t)
        if w == 1.0:
            return v_cond
        return cfg_velocity(v_cond, gen_model(x, null, t), w)

    eps = torch.empty(
        batch, gen_model.frames, gen_model.tokens, cfg.c_m
    ).normal_(generator=rng)
    with torch.no_grad():
        return euler_integrate(vel, eps, steps)
