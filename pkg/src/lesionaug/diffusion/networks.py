"""Class embedding network and the conditioned latent denoiser."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ValidationError


class ClassEmbedding(nn.Module):
    """One-hot label -> fully connected network -> embedding vector."""

    def __init__(self, num_classes: int, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim
        self.config = dict(num_classes=num_classes, dim=dim, hidden=hidden)
        self.num_classes = num_classes
        self.net = nn.Sequential(nn.Linear(num_classes, hidden), nn.SiLU(), nn.Linear(hidden, dim))

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= self.num_classes):
            raise ValidationError("label outside the embedded class set")
        onehot = F.one_hot(labels.long(), self.num_classes).to(self.net[0].weight.dtype)
        return self.net(onehot)


def sinusoidal_table(T: int, dim: int) -> torch.Tensor:
    """Row t holds the embedding of timestep t (row 0 unused)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    t = torch.arange(T + 1, dtype=torch.float64)[:, None]
    table = torch.cat([torch.sin(t * freqs), torch.cos(t * freqs)], dim=1)
    if dim % 2:
        table = F.pad(table, (0, 1))
    return table.float()


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0 and ch >= 2 * g:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, 2 * cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Two-level encoder/decoder with skip connections predicting image-latent noise.

    Input is ``z = [z_xt, z_dt, b*]`` with ``2 * latent_channels + 1`` channels;
    the class embedding is added to the timestep embedding.
    """

    def __init__(self, latent_channels: int, T: int, emb_dim: int, width: int = 32):
        super().__init__()
        self.config = dict(latent_channels=latent_channels, T=T, emb_dim=emb_dim, width=width)
        self.latent_channels = latent_channels
        self.in_channels = 2 * latent_channels + 1
        self.register_buffer("time_table", sinusoidal_table(T, emb_dim), persistent=False)
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))

        w = width
        self.conv_in = nn.Conv2d(self.in_channels, w, 3, padding=1)
        self.down1 = ResBlock(w, w, emb_dim)
        self.downsample = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.down2 = ResBlock(w, 2 * w, emb_dim)
        self.mid = ResBlock(2 * w, 2 * w, emb_dim)
        self.upsample = nn.Conv2d(2 * w, w, 3, padding=1)
        self.up1 = ResBlock(2 * w, w, emb_dim)
        self.norm_out = nn.GroupNorm(_groups(w), w)
        self.conv_out = nn.Conv2d(w, latent_channels, 3, padding=1)

    def forward(self, z: torch.Tensor, t: torch.Tensor, y_emb: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.in_channels:
            raise ValidationError(f"denoiser expects {self.in_channels} input channels, got {z.shape[1]}")
        t = torch.as_tensor(t, dtype=torch.long, device=z.device).expand(z.shape[0])
        emb = self.time_mlp(self.time_table[t].to(z.dtype)) + y_emb
        emb = F.silu(emb)

        h0 = self.down1(self.conv_in(z), emb)
        h = self.down2(self.downsample(h0), emb)
        h = self.mid(h, emb)
        h = F.interpolate(h, size=h0.shape[-2:], mode="nearest")
        h = self.up1(torch.cat([self.upsample(h), h0], dim=1), emb)
        return self.conv_out(F.silu(self.norm_out(h)))
