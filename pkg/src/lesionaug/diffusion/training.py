"""Conditioned noise-prediction loss and the fine-tuning loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from ..config import PipelineConfig
from ..datamodel import LabeledSample, LongTailDataset
from ..errors import TrainingError, ValidationError
from ..segmentation import rescale_mask
from .codec import LatentCodec
from .networks import ClassEmbedding, Denoiser
from .schedule import NoiseSchedule, build_schedule, forward_sample

logger = logging.getLogger(__name__)


@dataclass
class ConditionedLatent:
    z_xt: torch.Tensor
    z_dt: torch.Tensor
    b_star: torch.Tensor
    t: torch.Tensor
    y_emb: torch.Tensor

    @property
    def z(self) -> torch.Tensor:
        return torch.cat([self.z_xt, self.z_dt, self.b_star], dim=1)


def condition(
    z_x0: torch.Tensor,
    z_d0: torch.Tensor,
    b_star: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    eps_background: torch.Tensor,
    y_emb: torch.Tensor,
    sched: NoiseSchedule,
) -> ConditionedLatent:
    if z_x0.shape != z_d0.shape or b_star.shape[-2:] != z_x0.shape[-2:] or b_star.shape[1] != 1:
        raise ValidationError(
            f"latent shapes differ: z_x {tuple(z_x0.shape)}, z_d {tuple(z_d0.shape)}, b* {tuple(b_star.shape)}"
        )
    return ConditionedLatent(
        forward_sample(z_x0, t, eps, sched),
        forward_sample(z_d0, t, eps_background, sched),
        b_star.to(z_x0.dtype),
        t,
        y_emb,
    )


def denoise_loss_latent(
    z_x0: torch.Tensor,
    z_d0: torch.Tensor,
    b_star: torch.Tensor,
    labels: torch.Tensor,
    t: torch.Tensor,
    sched: NoiseSchedule,
    embedder: ClassEmbedding,
    denoiser: Denoiser,
    generator: torch.Generator | None = None,
    shared_background_noise: bool = False,
) -> torch.Tensor:
    """Mean squared error between the drawn image-latent noise and the prediction."""
    eps = torch.randn(z_x0.shape, generator=generator, dtype=z_x0.dtype)
    eps_bg = eps if shared_background_noise else torch.randn(z_d0.shape, generator=generator, dtype=z_d0.dtype)
    cond = condition(z_x0, z_d0, b_star, t, eps, eps_bg, embedder(labels), sched)
    pred = denoiser(cond.z, cond.t, cond.y_emb)
    return ((eps - pred) ** 2).mean()


def encode_batch(
    codec: LatentCodec, images: torch.Tensor, backgrounds: torch.Tensor, masks: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if images.shape != backgrounds.shape or masks.shape[-2:] != images.shape[-2:]:
        raise ValidationError("image, background and mask shapes differ")
    return codec.encode(images), codec.encode(backgrounds), rescale_mask(masks, codec.factor)


def denoise_loss(
    batch: Sequence[LabeledSample] | dict[str, torch.Tensor],
    t: torch.Tensor,
    sched: NoiseSchedule,
    codec: LatentCodec,
    embedder: ClassEmbedding,
    denoiser: Denoiser,
    generator: torch.Generator | None = None,
    shared_background_noise: bool = False,
) -> torch.Tensor:
    """Loss for a batch of samples (or a dict of stacked tensors) at timesteps ``t``."""
    if not isinstance(batch, dict):
        if not batch:
            raise ValidationError("empty batch")
        batch = {
            "image": torch.stack([s.image for s in batch]),
            "background": torch.stack([s.background for s in batch]),
            "mask": torch.stack([s.mask for s in batch]),
            "label": torch.tensor([s.label for s in batch]),
        }
    dtype = next(denoiser.parameters()).dtype
    with torch.no_grad():
        z_x0, z_d0, b_star = encode_batch(
            codec, batch["image"].to(dtype), batch["background"].to(dtype), batch["mask"].to(dtype)
        )
    t = torch.as_tensor(t, dtype=torch.long).expand(len(z_x0))
    return denoise_loss_latent(
        z_x0, z_d0, b_star, batch["label"], t, sched, embedder, denoiser, generator, shared_background_noise
    )


@dataclass
class DiffusionCheckpoint:
    denoiser: Denoiser
    embedder: ClassEmbedding
    codec: LatentCodec
    schedule: NoiseSchedule
    config: dict
    final_smoothed_loss: float = float("nan")
    loss_history: list[float] = field(default_factory=list)

    def parameter_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"denoiser.{k}": v for k, v in self.denoiser.state_dict().items()}
        out.update({f"embedder.{k}": v for k, v in self.embedder.state_dict().items()})
        return out


def build_models(cfg: PipelineConfig, num_classes: int, seed: int) -> tuple[Denoiser, ClassEmbedding]:
    torch.manual_seed(seed)
    denoiser = Denoiser(cfg.latent_channels, cfg.diffusion_steps, cfg.class_embedding_dim, cfg.denoiser_width)
    embedder = ClassEmbedding(num_classes, cfg.class_embedding_dim)
    return denoiser, embedder


def smoothed(history: Sequence[float], window: int) -> float:
    window = max(1, min(window, len(history)))
    return float(np.mean(history[-window:])) if history else float("nan")


def finetune(
    dataset: LongTailDataset,
    multiset: Sequence[int],
    codec: LatentCodec,
    cfg: PipelineConfig,
    seed: int,
) -> DiffusionCheckpoint:
    """Train denoiser and class embedder jointly on the oversampled multiset.

    ``multiset`` holds dataset indices (repeats allowed), typically from
    :func:`lesionaug.selection.build_finetune_multiset`.
    """
    sched = build_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    denoiser, embedder = build_models(cfg, dataset.num_classes, seed)
    ckpt = DiffusionCheckpoint(denoiser, embedder, codec, sched, cfg.to_dict())
    if cfg.train_steps == 0:
        denoiser.eval()
        embedder.eval()
        return ckpt
    multiset = np.asarray(multiset, dtype=np.int64)
    if len(multiset) == 0:
        raise ValidationError("fine-tuning multiset is empty")

    stacked = dataset.stack()
    with torch.no_grad():
        z_x, z_d, b_star = [], [], []
        for i in range(0, dataset.total, 512):
            zx, zd, bs = encode_batch(
                codec, stacked["image"][i : i + 512], stacked["background"][i : i + 512], stacked["mask"][i : i + 512]
            )
            z_x.append(zx)
            z_d.append(zd)
            b_star.append(bs)
        z_x, z_d, b_star = torch.cat(z_x), torch.cat(z_d), torch.cat(b_star)
    labels = stacked["label"]

    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    params = list(denoiser.parameters()) + list(embedder.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    history: list[float] = []
    order = rng.permutation(multiset)
    pos = 0
    denoiser.train()
    embedder.train()
    for step in range(cfg.train_steps):
        if pos + cfg.batch_size > len(order):
            order = rng.permutation(multiset)
            pos = 0
        idx = torch.from_numpy(order[pos : pos + cfg.batch_size])
        pos += cfg.batch_size
        t = torch.randint(1, sched.T + 1, (len(idx),), generator=gen)
        loss = denoise_loss_latent(
            z_x[idx], z_d[idx], b_star[idx], labels[idx], t, sched, embedder, denoiser, gen,
            cfg.shared_background_noise,
        )
        if not torch.isfinite(loss):
            raise TrainingError("diffusion loss is not finite", step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(loss.item())
    denoiser.eval()
    embedder.eval()
    window = max(1, cfg.train_steps // 20)
    ckpt.loss_history = history
    ckpt.final_smoothed_loss = smoothed(history, window)
    logger.info(
        "finetune: %d steps, loss %.4f -> %.4f",
        cfg.train_steps, float(np.mean(history[:window])), ckpt.final_smoothed_loss,
    )
    return ckpt
