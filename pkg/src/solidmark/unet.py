"""Small convolutional U-Net epsilon-predictor sized for CPU training at 40x40."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TinyUNet(nn.Module):
    """Two-level U-Net with additive time/condition embedding.

    The bottleneck is also average-pooled into a global vector that is fed
    back into every decoder block, so a border pixel can depend on the whole
    query interior (which is what key recall needs).  Spatial dims must be
    divisible by 4.
    """

    def __init__(self, in_ch: int = 3, ch: int = 32, cond_dim: int = 0):
        super().__init__()
        emb = 4 * ch
        self.ch = ch
        self.time = nn.Sequential(nn.Linear(ch, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.cond = nn.Linear(cond_dim, emb) if cond_dim else None
        self.inp = nn.Conv2d(in_ch, ch, 3, padding=1)
        self.down1 = ResBlock(ch, ch, emb)
        self.down2 = ResBlock(ch, 2 * ch, emb)
        self.mid = ResBlock(2 * ch, 2 * ch, emb)
        self.glob = nn.Sequential(nn.Linear(2 * ch, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.up2 = ResBlock(4 * ch, ch, emb)
        self.up1 = ResBlock(2 * ch, ch, emb)
        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out = nn.Conv2d(ch, in_ch, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, t, cond=None):
        e = self.time(timestep_embedding(t, self.ch))
        if self.cond is not None and cond is not None:
            e = e + self.cond(cond)
        h0 = self.inp(x)
        h1 = self.down1(h0, e)
        h2 = self.down2(F.avg_pool2d(h1, 2), e)
        h3 = self.mid(F.avg_pool2d(h2, 2), e)
        g = e + self.glob(h3.mean(dim=(2, 3)))
        u = F.interpolate(h3, scale_factor=2, mode="nearest")
        u = self.up2(torch.cat([u, h2], 1), g)
        u = F.interpolate(u, scale_factor=2, mode="nearest")
        u = self.up1(torch.cat([u, h1], 1), g)
        return self.out(F.silu(self.out_norm(u)))


class TorchDenoiser:
    """numpy-facing wrapper implementing the ``Denoiser`` contract."""

    def __init__(self, module: nn.Module, conditional: bool, image_shape, batch_size: int = 256):
        self.module = module.eval()
        self.conditional = conditional
        self.image_shape = tuple(image_shape)
        self.batch_size = batch_size
        self.calls = 0

    @torch.no_grad()
    def predict_eps(self, x_t: np.ndarray, t: np.ndarray, cond: np.ndarray | None) -> np.ndarray:
        self.calls += 1
        out = np.empty_like(x_t, dtype=np.float64)
        for s in range(0, x_t.shape[0], self.batch_size):
            sl = slice(s, s + self.batch_size)
            xb = torch.from_numpy(np.ascontiguousarray(x_t[sl], dtype=np.float32))
            tb = torch.from_numpy(np.asarray(t[sl], dtype=np.int64))
            cb = None
            if self.conditional and cond is not None:
                cb = torch.from_numpy(np.ascontiguousarray(cond[sl], dtype=np.float32))
            out[sl] = self.module(xb, tb, cb).numpy()
        return out
