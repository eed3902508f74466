"""Pipeline configuration.

A single flat dataclass so that every field can be overridden from the command
line with a flag of the same name (``--diffusion_steps 100``).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import ValidationError


@dataclass(frozen=True)
class PipelineConfig:
    # data
    image_size: int = 16
    image_channels: int = 3

    # latent codec
    latent_downscale_factor: int = 2
    latent_channels: int = 6
    codec_width: int = 16
    codec_steps: int = 300
    codec_lr: float = 2e-3

    # diffusion
    diffusion_steps: int = 50
    beta_start: float = 1e-3
    beta_end: float = 0.2
    class_embedding_dim: int = 32
    denoiser_width: int = 24
    train_steps: int = 1000
    learning_rate: float = 1e-3
    batch_size: int = 64
    shared_background_noise: bool = False
    generation_batch_size: int = 1024

    # anomaly scorers
    scorer_steps: int = 600
    scorer_lr: float = 2e-3
    scorer_latent_dim: int = 8
    standardize_scores: bool = False

    # ood filter
    gamma: float = 0.4

    # classifier
    classifier_width: int = 16
    classifier_steps: int = 600
    classifier_lr: float = 2e-3
    classifier_batch_size: int = 64

    # segmentation
    seg_threshold_mode: str = "otsu"
    seg_fixed_threshold: float = 0.5
    seg_min_region_fraction: float = 0.02
    seg_morph_radius: int = 1

    # protocol
    folds: int = 5
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValidationError(
                f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}"
            )
        if self.diffusion_steps < 1:
            raise ValidationError("diffusion_steps must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValidationError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.folds < 2:
            raise ValidationError("folds must be >= 2")
        if self.latent_channels <= self.image_channels:
            raise ValidationError("latent_channels must exceed image_channels")
        if self.image_size % self.latent_downscale_factor:
            raise ValidationError("image_size must be divisible by latent_downscale_factor")
        for name in ("train_steps", "codec_steps", "scorer_steps", "classifier_steps"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")

    def replace(self, **changes: Any) -> PipelineConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PipelineConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | Path) -> PipelineConfig:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ValidationError(f"config file {path} must hold a mapping")
        return cls.from_dict(data)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def fingerprint(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def config_field_types() -> dict[str, type]:
    """Field name -> python type, used to build CLI override flags."""
    mapping = {"int": int, "float": float, "str": str, "bool": bool}
    return {f.name: mapping[f.type] if isinstance(f.type, str) else f.type for f in fields(PipelineConfig)}
