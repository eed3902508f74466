"""Ancestral reverse sampling with background/mask conditioning and pixel compositing."""

from __future__ import annotations

import torch

from ..errors import GenerationError, ValidationError
from ..segmentation import rescale_mask
from .schedule import forward_sample
from .training import DiffusionCheckpoint


@torch.no_grad()
def generate_batch(
    backgrounds: torch.Tensor,
    masks: torch.Tensor,
    labels: torch.Tensor,
    ckpt: DiffusionCheckpoint,
    generator: torch.Generator,
) -> torch.Tensor:
    """Inpaint the masked region of each background for the requested labels.

    The background latent is re-noised to level t at every step (fresh draw, as
    in training); mask and clean background latent are held fixed.
    """
    if backgrounds.ndim != 4 or masks.shape != (backgrounds.shape[0], 1, *backgrounds.shape[-2:]):
        raise ValidationError(
            f"background {tuple(backgrounds.shape)} and mask {tuple(masks.shape)} shapes are incompatible"
        )
    if len(labels) != len(backgrounds):
        raise ValidationError("one label per background required")
    codec, denoiser, sched = ckpt.codec, ckpt.denoiser, ckpt.schedule
    dtype = next(denoiser.parameters()).dtype
    shared = bool(ckpt.config.get("shared_background_noise", False))

    z_d0 = codec.encode(backgrounds.to(dtype))
    b_star = rescale_mask(masks.to(dtype), codec.factor)
    y_emb = ckpt.embedder(torch.as_tensor(labels, dtype=torch.long))
    z = torch.randn(z_d0.shape, generator=generator, dtype=dtype)
    betas = sched.betas.to(dtype)
    abars = sched.alpha_bars.to(dtype)
    for t in range(sched.T, 0, -1):
        if shared:
            # best available estimate of the noise carried by z: its implied value at this level
            eps_bg = (z - abars[t - 1].sqrt() * z_d0) / (1 - abars[t - 1]).sqrt()
        else:
            eps_bg = torch.randn(z_d0.shape, generator=generator, dtype=dtype)
        z_dt = forward_sample(z_d0, t, eps_bg, sched)
        eps_hat = denoiser(torch.cat([z, z_dt, b_star], dim=1), t, y_emb)
        beta, abar = betas[t - 1], abars[t - 1]
        z = (z - beta / (1 - abar).sqrt() * eps_hat) / (1 - beta).sqrt()
        if t > 1:
            z = z + beta.sqrt() * torch.randn(z.shape, generator=generator, dtype=dtype)
        if not torch.isfinite(z).all():
            raise GenerationError(f"non-finite latent at step {t}")
    generated = codec.decode(z).clamp(0, 1).to(backgrounds.dtype)
    return generated * masks + backgrounds * (1 - masks)


def generate(
    background: torch.Tensor,
    mask: torch.Tensor,
    label: int,
    ckpt: DiffusionCheckpoint,
    generator: torch.Generator,
) -> torch.Tensor:
    """Single-image convenience wrapper around :func:`generate_batch`."""
    return generate_batch(background[None], mask[None], torch.tensor([label]), ckpt, generator)[0]
