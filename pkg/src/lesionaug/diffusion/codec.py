"""Small convolutional autoencoder used as the latent codec.

Stands in for a pre-trained VAE: trained with a plain reconstruction loss on
training-fold images and backgrounds, then frozen.

The first ``image_channels`` latent channels are the block-averaged image, so
low-frequency colour survives encoding exactly; the remaining channels are
learned and only have to carry within-block detail. Latents are standardised
per channel with statistics measured after training.
"""

from __future__ import annotations

import logging

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import TrainingError, ValidationError

logger = logging.getLogger(__name__)


class LatentCodec(nn.Module):
    def __init__(self, image_channels: int = 3, latent_channels: int = 6, width: int = 32, factor: int = 2):
        super().__init__()
        if factor < 1 or factor & (factor - 1):
            raise ValidationError("downscale factor must be a power of two")
        if latent_channels <= image_channels:
            raise ValidationError("latent_channels must exceed image_channels")
        self.config = dict(image_channels=image_channels, latent_channels=latent_channels, width=width, factor=factor)
        self.factor = factor
        self.image_channels = image_channels
        self.latent_channels = latent_channels
        learned = latent_channels - image_channels

        self.encoder = nn.Sequential(
            nn.Conv2d(image_channels, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, factor, stride=factor), nn.SiLU(),
            nn.Conv2d(width, learned, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(width, width, factor, stride=factor), nn.SiLU(),
            nn.Conv2d(width, image_channels, 3, padding=1),
        )
        self.register_buffer("latent_shift", torch.zeros(latent_channels))
        self.register_buffer("latent_scale", torch.ones(latent_channels))

    def _raw_encode(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([F.avg_pool2d(x, self.factor), self.encoder(x)], dim=1)

    def _raw_decode(self, z: torch.Tensor) -> torch.Tensor:
        coarse = F.interpolate(z[:, : self.image_channels], scale_factor=self.factor, mode="nearest")
        return coarse + self.decoder(z)

    def _stats(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        shape = (1, -1, 1, 1)
        return self.latent_shift.reshape(shape).to(z.dtype), self.latent_scale.reshape(shape).to(z.dtype)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        z = self._raw_encode(x)
        shift, scale = self._stats(z)
        return (z - shift) / scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        shift, scale = self._stats(z)
        return self._raw_decode(z * scale + shift)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self._raw_decode(self._raw_encode(x))


def pretrain_codec(
    images: torch.Tensor,
    steps: int,
    lr: float = 2e-3,
    batch_size: int = 64,
    width: int = 32,
    latent_channels: int = 6,
    factor: int = 2,
    seed: int = 0,
) -> LatentCodec:
    """Fit the codec on ``images`` (N x C x H x W) and freeze it."""
    if images.ndim != 4 or len(images) == 0:
        raise ValidationError("expected a nonempty N x C x H x W tensor")
    torch.manual_seed(seed)
    codec = LatentCodec(images.shape[1], latent_channels, width, factor)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    for step in range(steps):
        idx = torch.randint(len(images), (batch_size,), generator=gen)
        loss = F.mse_loss(codec(images[idx]), images[idx])
        if not torch.isfinite(loss):
            raise TrainingError("codec loss is not finite", step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    codec.eval().requires_grad_(False)
    with torch.no_grad():
        z = torch.cat([codec._raw_encode(images[i : i + 512]) for i in range(0, len(images), 512)])
        codec.latent_shift.copy_(z.mean(dim=(0, 2, 3)))
        codec.latent_scale.copy_(z.std(dim=(0, 2, 3)).clamp_min(1e-6))
        err = reconstruction_error(codec, images)
    logger.info("codec trained: %d steps, mse %.5f", steps, err)
    return codec


@torch.no_grad()
def reconstruction_error(codec: LatentCodec, images: torch.Tensor) -> float:
    recon = torch.cat([codec.decode(codec.encode(images[i : i + 512])) for i in range(0, len(images), 512)])
    return float(F.mse_loss(recon.clamp(0, 1), images))
