"""Diffusion-based inpainting augmentation for long-tailed image classification."""

from .config import PipelineConfig
from .datamodel import LabeledSample, LongTailDataset, SyntheticBudget, compute_budget, load_manifest, stratified_kfold

__version__ = "0.1.0"

__all__ = [
    "LabeledSample",
    "LongTailDataset",
    "PipelineConfig",
    "SyntheticBudget",
    "compute_budget",
    "load_manifest",
    "stratified_kfold",
]
