from __future__ import annotations

from pathlib import Path

from ..checkpoint import load_container, save_container
from .codec import LatentCodec, pretrain_codec, reconstruction_error
from .networks import ClassEmbedding, Denoiser
from .sampling import generate, generate_batch
from .schedule import NoiseSchedule, build_schedule, forward_sample
from .training import (
    ConditionedLatent,
    DiffusionCheckpoint,
    build_models,
    condition,
    denoise_loss,
    denoise_loss_latent,
    finetune,
)


def save_codec(path: str | Path, codec: LatentCodec) -> None:
    save_container(path, "codec", {"config": codec.config, "state": codec.state_dict()})


def load_codec(path: str | Path) -> LatentCodec:
    payload = load_container(path, "codec")
    return codec_from_payload(payload)


def codec_from_payload(payload: dict) -> LatentCodec:
    codec = LatentCodec(**payload["config"])
    codec.load_state_dict(payload["state"])
    return codec.eval().requires_grad_(False)


def save_checkpoint(path: str | Path, ckpt: DiffusionCheckpoint) -> None:
    save_container(
        path,
        "diffusion",
        {
            "denoiser": {"config": ckpt.denoiser.config, "state": ckpt.denoiser.state_dict()},
            "embedder": {"config": ckpt.embedder.config, "state": ckpt.embedder.state_dict()},
            "codec": {"config": ckpt.codec.config, "state": ckpt.codec.state_dict()},
            "schedule": ckpt.schedule.state_dict(),
            "config": ckpt.config,
            "final_smoothed_loss": ckpt.final_smoothed_loss,
            "loss_history": list(ckpt.loss_history),
        },
    )


def load_checkpoint(path: str | Path) -> DiffusionCheckpoint:
    payload = load_container(path, "diffusion")
    denoiser = Denoiser(**payload["denoiser"]["config"])
    denoiser.load_state_dict(payload["denoiser"]["state"])
    embedder = ClassEmbedding(**payload["embedder"]["config"])
    embedder.load_state_dict(payload["embedder"]["state"])
    return DiffusionCheckpoint(
        denoiser.eval(),
        embedder.eval(),
        codec_from_payload(payload["codec"]),
        NoiseSchedule.from_state_dict(payload["schedule"]),
        payload["config"],
        payload["final_smoothed_loss"],
        payload["loss_history"],
    )


__all__ = [
    "ClassEmbedding",
    "ConditionedLatent",
    "Denoiser",
    "DiffusionCheckpoint",
    "LatentCodec",
    "NoiseSchedule",
    "build_models",
    "build_schedule",
    "condition",
    "denoise_loss",
    "denoise_loss_latent",
    "finetune",
    "forward_sample",
    "generate",
    "generate_batch",
    "load_checkpoint",
    "load_codec",
    "pretrain_codec",
    "reconstruction_error",
    "save_checkpoint",
    "save_codec",
]
