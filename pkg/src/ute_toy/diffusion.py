"""Noise schedule, glyph-conditioned inpainting UNet and the deterministic DDIM sampler.

Timesteps run over ``1..T``; index 0 of the cumulative table is the clean
state with ``alpha_bar_0 = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    def to_config(self) -> dict:
        return {"T": self.T, "beta_start": float(self.betas[1]), "beta_end": float(self.betas[-1])}


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule stored in float64, padded so that index t is step t."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    betas = torch.cat([torch.zeros(1, dtype=torch.float64), betas])
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, torch.cumprod(alphas, 0))


def _gather(table: torch.Tensor, t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    vals = table[t].to(like.dtype)
    if vals.ndim == 0:
        return vals
    return vals.view(-1, *([1] * (like.ndim - 1)))


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward process: ``sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps``.

    ``t`` is an int or a per-batch tensor of steps in ``0..T``.
    """
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match latent shape {tuple(z0.shape)}")
    tt = torch.as_tensor(t)
    if (tt < 0).any() or (tt > schedule.T).any():
        raise ValueError(f"timestep out of range 0..{schedule.T}")
    ab = _gather(schedule.alpha_bars, t, z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, d: int | None = None) -> torch.Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over the last two dimensions."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    d = q.shape[-1] if d is None else d
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
    return weights @ v


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, context_dim: int | None = None, heads: int = 4):
        super().__init__()
        context_dim = context_dim or dim
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context=None):
        context = x if context is None else context
        b, n, dim = x.shape
        hd = dim // self.heads

        def split(t):
            return t.view(b, -1, self.heads, hd).transpose(1, 2)

        out = attention(split(self.to_q(x)), split(self.to_k(context)), split(self.to_v(context)), hd)
        return self.to_out(out.transpose(1, 2).reshape(b, n, dim))


# ---------------------------------------------------------------------------
# UNet
# ---------------------------------------------------------------------------

@dataclass
class UnetConfig:
    """Channel plan of the denoiser.

    ``use_glyph`` / ``use_position`` switch the conditioning off by zeroing the
    glyph tokens or the (masked latent, mask) channels; the channel layout is
    unchanged so ablations share an identical architecture.
    """

    latent_channels: int = 4
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    attention_levels: tuple[int, ...] = (0, 1)
    context_dim: int = 64
    heads: int = 4
    groups: int = 8
    use_glyph: bool = True
    use_position: bool = True

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        self.attention_levels = tuple(self.attention_levels)
        if not self.attention_levels:
            raise ValueError("cross-attention must be present at one or more levels")

    @property
    def in_channels(self) -> int:
        return 2 * self.latent_channels + 1


@dataclass
class UnetInput:
    """Bundle of denoiser inputs; validates shapes and builds ``Concat(x_m, m, z_t)``."""

    z_t: torch.Tensor
    x_m: torch.Tensor
    m_lat: torch.Tensor
    t: torch.Tensor
    e_g: torch.Tensor

    def __post_init__(self):
        if self.z_t.ndim != 4 or self.x_m.shape != self.z_t.shape:
            raise ValueError(f"z_t {tuple(self.z_t.shape)} and x_m {tuple(self.x_m.shape)} must share shape")
        n, _, h, w = self.z_t.shape
        if tuple(self.m_lat.shape) != (n, 1, h, w):
            raise ValueError(f"mask latent must be {(n, 1, h, w)}, got {tuple(self.m_lat.shape)}")
        if self.e_g.ndim != 3 or self.e_g.shape[0] != n:
            raise ValueError(f"glyph context must be (N, M, d), got {tuple(self.e_g.shape)}")
        t = torch.as_tensor(self.t, dtype=torch.long)
        self.t = t.expand(n) if t.ndim == 0 else t

    def concat(self) -> torch.Tensor:
        return torch.cat([self.x_m, self.m_lat, self.z_t], dim=1)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimeResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialTransformer(nn.Module):
    """Self-attention, glyph cross-attention and a feed-forward layer over spatial positions."""

    def __init__(self, dim: int, context_dim: int, heads: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(min(groups, dim), dim)
        self.proj_in = nn.Conv2d(dim, dim, 1)
        self.ln1, self.ln2, self.ln3 = nn.LayerNorm(dim), nn.LayerNorm(dim), nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads=heads)
        self.cross_attn = MultiHeadAttention(dim, context_dim, heads=heads)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.proj_out = nn.Conv2d(dim, dim, 1)

    def forward(self, x, context):
        b, c, h, w = x.shape
        tokens = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        tokens = tokens + self.self_attn(self.ln1(tokens))
        tokens = tokens + self.cross_attn(self.ln2(tokens), context)
        tokens = tokens + self.ff(self.ln3(tokens))
        return x + self.proj_out(tokens.transpose(1, 2).reshape(b, c, h, w))


class UNet(nn.Module):
    """Noise predictor over the concatenated ``2c + 1``-channel latent."""

    def __init__(self, config: UnetConfig | None = None):
        super().__init__()
        self.config = cfg = config or UnetConfig()
        widths = [cfg.base_width * m for m in cfg.channel_mults]
        temb = 4 * cfg.base_width
        self.time_mlp = nn.Sequential(nn.Linear(cfg.base_width, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1)

        def attn(level, width):
            if level in cfg.attention_levels:
                return SpatialTransformer(width, cfg.context_dim, cfg.heads, cfg.groups)
            return None

        self.down_res, self.down_attn, self.downsamplers = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        prev = widths[0]
        for level, width in enumerate(widths):
            self.down_res.append(TimeResBlock(prev, width, temb, cfg.groups))
            self.down_attn.append(attn(level, width) or nn.Identity())
            last = level == len(widths) - 1
            self.downsamplers.append(nn.Identity() if last else nn.Conv2d(width, width, 3, stride=2, padding=1))
            prev = width
        self.mid_res1 = TimeResBlock(prev, prev, temb, cfg.groups)
        self.mid_attn = SpatialTransformer(prev, cfg.context_dim, cfg.heads, cfg.groups)
        self.mid_res2 = TimeResBlock(prev, prev, temb, cfg.groups)
        self.up_res, self.up_attn, self.upsamplers = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        for level in reversed(range(len(widths))):
            width = widths[level]
            self.up_res.append(TimeResBlock(prev + width, width, temb, cfg.groups))
            self.up_attn.append(attn(level, width) or nn.Identity())
            self.upsamplers.append(nn.Identity() if level == 0 else nn.Upsample(scale_factor=2, mode="nearest"))
            prev = width
        self.norm_out = nn.GroupNorm(min(cfg.groups, prev), prev)
        self.conv_out = nn.Conv2d(prev, cfg.latent_channels, 3, padding=1)

    @staticmethod
    def _block(block, x, context):
        return x if isinstance(block, nn.Identity) else block(x, context)

    def forward(self, z_t, t, x_m, m_lat, e_g) -> torch.Tensor:
        inp = UnetInput(z_t, x_m, m_lat, t, e_g)
        cfg = self.config
        if z_t.shape[1] != cfg.latent_channels:
            raise ValueError(f"expected {cfg.latent_channels} latent channels, got {z_t.shape[1]}")
        if e_g.shape[-1] != cfg.context_dim:
            raise ValueError(f"glyph context width {e_g.shape[-1]} != {cfg.context_dim}")
        if not cfg.use_position:
            inp.x_m = torch.zeros_like(inp.x_m)
            inp.m_lat = torch.zeros_like(inp.m_lat)
        context = e_g if cfg.use_glyph else torch.zeros_like(e_g)
        emb = self.time_mlp(timestep_embedding(inp.t, cfg.base_width).to(z_t.dtype))
        h = self.conv_in(inp.concat())
        skips = []
        for res, att, down in zip(self.down_res, self.down_attn, self.downsamplers):
            h = self._block(att, res(h, emb), context)
            skips.append(h)
            h = down(h)
        h = self.mid_res2(self.mid_attn(self.mid_res1(h, emb), context), emb)
        for res, att, up in zip(self.up_res, self.up_attn, self.upsamplers):
            h = self._block(att, res(torch.cat([h, skips.pop()], dim=1), emb), context)
            h = up(h)
        return self.conv_out(F.silu(self.norm_out(h)))


def downsample_mask(mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Pixel mask ``(N, 1, H, W)`` to latent grid: a cell is 1 if any of its pixels is masked."""
    return F.max_pool2d(mask, factor)


# ---------------------------------------------------------------------------
# DDIM
# ---------------------------------------------------------------------------

Denoiser = Callable[..., torch.Tensor]


class NonFiniteSampleError(RuntimeError):
    pass


def ddim_timesteps(T: int, n_steps: int) -> list[int]:
    """Descending evenly spaced steps from T; ``n_steps == T`` gives T, T-1, ..., 1."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must be in 1..{T}, got {n_steps}")
    return sorted({T - (i * T) // n_steps for i in range(n_steps)}, reverse=True)


def initial_noise(shape, seeds) -> torch.Tensor:
    """Per-sample ``N(0, I)`` draws so that batching does not change any sample's noise."""
    n, *rest = shape
    if isinstance(seeds, int):
        return torch.randn(shape, generator=torch.Generator().manual_seed(seeds))
    return torch.stack([torch.randn(rest, generator=torch.Generator().manual_seed(int(s))) for s in seeds])


@torch.no_grad()
def ddim_sample(
    model: Denoiser,
    x_m: torch.Tensor,
    m_lat: torch.Tensor,
    e_g: torch.Tensor,
    schedule: NoiseSchedule,
    n_steps: int,
    seed=0,
    z_T: torch.Tensor | None = None,
) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM from ``z_T ~ N(0, I)`` down to step 0.

    ``seed`` may be one int for the whole batch or one int per sample.

    Raises:
        NonFiniteSampleError: if any intermediate latent is NaN or infinite.
    """
    if z_T is None:
        z_T = initial_noise(x_m.shape, seed).to(x_m.dtype)
    z = z_T
    steps = ddim_timesteps(schedule.T, n_steps)
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        ab, ab_prev = schedule.alpha_bars[t].item(), schedule.alpha_bars[t_prev].item()
        eps = model(z, torch.full((len(z),), t, dtype=torch.long), x_m, m_lat, e_g)
        x0 = (z - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        z = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
        if not torch.isfinite(z).all():
            raise NonFiniteSampleError(f"non-finite latent at DDIM step t={t}")
    return z
