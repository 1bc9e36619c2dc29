"""Small conditional U-Net noise predictor eps_theta(z_t, t, cond)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import CELL_FEATURES, ConditioningEncoder


@dataclass(frozen=True)
class DenoiserConfig:
    canvas: int = 64
    grid_size: int = 4
    channels: int = 32
    emb_dim: int = 128
    patch: int = 2
    prediction: str = "eps"  # raw output head: "eps", or "v" converted to eps with the schedule

    def __post_init__(self):
        if self.prediction not in ("eps", "v"):
            raise ValueError(f"unknown prediction head {self.prediction!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    """Two convs with feature-wise (scale, shift) modulation from the embedding."""

    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(8, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.film = nn.Linear(emb_dim, 2 * cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = F.silu(self.norm1(self.conv1(x)))
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        h = h * (1 + scale) + shift
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Always returns eps_theta; with ``prediction="v"`` the head predicts
    v = sqrt(abar) eps - sqrt(1 - abar) x0 and the noise is recovered as
    sqrt(1 - abar) z_t + sqrt(abar) v, which needs the schedule's abar."""

    def __init__(self, config: DenoiserConfig = DenoiserConfig(), alpha_bars=None):
        super().__init__()
        self.config = config
        if config.prediction == "v":
            if alpha_bars is None:
                raise ValueError("a v-prediction head needs the schedule's alpha_bars")
            self.register_buffer("abar", torch.as_tensor(alpha_bars, dtype=torch.float32))
        self.encoder = ConditioningEncoder(config.grid_size)
        c, e, p = config.channels, config.emb_dim, config.patch
        self.t_mlp = nn.Sequential(nn.Linear(64, e), nn.SiLU(), nn.Linear(e, e))
        self.c_mlp = nn.Sequential(nn.Linear(self.encoder.global_dim, e), nn.SiLU(), nn.Linear(e, e))
        cin = 3 * p * p + 2 + CELL_FEATURES
        self.inp = nn.Conv2d(cin, c, 3, padding=1)
        self.down1 = ResBlock(c, c, e)
        self.pool1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.down2 = ResBlock(2 * c, 2 * c, e)
        self.pool2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.mid = ResBlock(2 * c, 2 * c, e)
        self.up2 = ResBlock(4 * c, 2 * c, e)
        self.up1 = ResBlock(3 * c, c, e)
        self.out = nn.Conv2d(c, 3 * p * p, 3, padding=1)

    def forward(self, z: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        p = self.config.patch
        b = z.shape[0]
        if t.ndim == 0:
            t = t.expand(b)
        glob, layout = self.encoder.split(cond)
        emb = self.t_mlp(timestep_embedding(t, 64).to(z.dtype)) + self.c_mlp(glob)
        x = F.pixel_unshuffle(z, p)
        h, w = x.shape[-2:]
        ys = torch.linspace(-1, 1, h, dtype=x.dtype)
        xs = torch.linspace(-1, 1, w, dtype=x.dtype)
        coords = torch.stack(torch.meshgrid(ys, xs, indexing="ij"))[None].expand(b, -1, -1, -1)
        lay = F.interpolate(layout.to(x.dtype), size=(h, w), mode="nearest")
        x = self.inp(torch.cat([x, coords, lay], dim=1))
        h1 = self.down1(x, emb)
        h2 = self.down2(self.pool1(h1), emb)
        m = self.mid(self.pool2(h2), emb)
        u = self.up2(torch.cat([F.interpolate(m, scale_factor=2), h2], 1), emb)
        u = self.up1(torch.cat([F.interpolate(u, scale_factor=2), h1], 1), emb)
        out = F.pixel_shuffle(self.out(u), p)
        if self.config.prediction == "v":
            a = self.abar.to(z.dtype)[t].reshape(-1, 1, 1, 1)
            out = (1 - a).sqrt() * z + a.sqrt() * out
        return out
