"""Per-class anomaly scoring, median-anchored sample weights and weighted oversampling.

Weights follow ``w = exp(-|median - score|)``: samples whose anomaly score sits
near the class median (approximately in-distribution) are repeated most often.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import LongTailDataset
from .errors import StateError, TrainingError, ValidationError

logger = logging.getLogger(__name__)


class ReconstructionAE(nn.Module):
    """Bottlenecked conv autoencoder; reconstruction error is the anomaly score."""

    def __init__(self, channels: int = 3, size: int = 16, latent_dim: int = 8, width: int = 16):
        super().__init__()
        self.config = dict(channels=channels, size=size, latent_dim=latent_dim, width=width)
        s = size // 4
        self.encoder = nn.Sequential(
            nn.Conv2d(channels, width, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1), nn.SiLU(),
            nn.Flatten(), nn.Linear(2 * width * s * s, latent_dim),
        )
        self.decoder = nn.Sequential(
            nn.Linear(latent_dim, 2 * width * s * s), nn.SiLU(), nn.Unflatten(1, (2 * width, s, s)),
            nn.ConvTranspose2d(2 * width, width, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(width, channels, 4, stride=2, padding=1), nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


@dataclass
class AnomalyScorer:
    """One reconstruction model per class, each fit on that class's training images only."""

    models: dict[int, nn.Module] = field(default_factory=dict)
    trained_on: dict[int, list[str]] = field(default_factory=dict)

    def has(self, label: int) -> bool:
        return label in self.models

    def score(self, label: int, images: torch.Tensor) -> np.ndarray:
        if label not in self.models:
            raise StateError(f"no trained scorer for class {label}")
        return score_class(images, self.models[label])

    def state(self) -> dict:
        return {
            str(j): {"config": m.config, "state": m.state_dict(), "trained_on": self.trained_on.get(j, [])}
            for j, m in self.models.items()
        }

    @classmethod
    def from_state(cls, state: dict) -> AnomalyScorer:
        scorer = cls()
        for key, entry in state.items():
            model = ReconstructionAE(**entry["config"])
            model.load_state_dict(entry["state"])
            model.eval().requires_grad_(False)
            scorer.models[int(key)] = model
            scorer.trained_on[int(key)] = list(entry["trained_on"])
        return scorer


def train_class_scorer(images: torch.Tensor, steps: int, lr: float, latent_dim: int, seed: int) -> ReconstructionAE:
    if len(images) == 0:
        raise ValidationError("cannot train a scorer on zero images")
    torch.manual_seed(seed)
    model = ReconstructionAE(images.shape[1], images.shape[-1], latent_dim)
    model.trained = steps > 0
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    batch = min(64, len(images))
    for step in range(steps):
        idx = torch.randint(len(images), (batch,), generator=gen)
        loss = F.mse_loss(model(images[idx]), images[idx])
        if not torch.isfinite(loss):
            raise TrainingError("scorer loss is not finite", step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return model.eval().requires_grad_(False)


def train_scorers(
    dataset: LongTailDataset,
    steps: int,
    lr: float = 2e-3,
    latent_dim: int = 8,
    seed: int = 0,
    classes: Sequence[int] | None = None,
) -> AnomalyScorer:
    scorer = AnomalyScorer()
    for j in classes if classes is not None else range(dataset.num_classes):
        idx = dataset.indices_of_class(j)
        if not idx:
            continue
        images = dataset.stack(idx)["image"]
        scorer.models[j] = train_class_scorer(images, steps, lr, latent_dim, seed + 7919 * (j + 1))
        scorer.trained_on[j] = [dataset.samples[i].sample_id for i in idx]
    return scorer


@torch.no_grad()
def score_class(images: torch.Tensor, model: nn.Module) -> np.ndarray:
    """Per-image mean squared reconstruction error."""
    if not getattr(model, "trained", True):
        raise StateError("scorer has not been trained")
    if len(images) == 0:
        return np.zeros(0)
    out = []
    for i in range(0, len(images), 1024):
        x = images[i : i + 1024]
        out.append(((model(x) - x) ** 2).flatten(1).mean(1).double())
    return torch.cat(out).numpy()


def median_anchor(scores: Sequence[float]) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValidationError("median of an empty score list")
    return float(np.median(scores))


def aid_weight(score: float, anchor: float) -> float:
    if not (math.isfinite(score) and math.isfinite(anchor)):
        raise ValidationError(f"non-finite score/anchor: {score}, {anchor}")
    return math.exp(-abs(anchor - score))


def oversample(weights: Sequence[float], target: int, rng: np.random.Generator) -> np.ndarray:
    """Every local index once, then ``target - n`` extra draws proportional to ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    n = len(w)
    if target < n:
        raise ValidationError(f"target {target} smaller than class size {n}")
    if n == 0:
        raise ValidationError("cannot oversample an empty class")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValidationError("weights must be finite and positive")
    extra = rng.choice(n, size=target - n, replace=True, p=w / w.sum())
    return np.concatenate([np.arange(n), extra])


@dataclass
class ClassWeights:
    indices: list[int]  # dataset indices of the class members
    scores: np.ndarray
    anchor: float
    weights: np.ndarray


@dataclass
class ClassWeightTable:
    per_class: dict[int, ClassWeights]
    target: int  # |c_1|

    def rows(self, dataset: LongTailDataset) -> list[dict]:
        out = []
        for j, cw in sorted(self.per_class.items()):
            for i, s, w in zip(cw.indices, cw.scores, cw.weights):
                out.append({"sample_id": dataset.samples[i].sample_id, "class": j, "score": float(s), "weight": float(w)})
        return out


def standardize(scores: np.ndarray) -> np.ndarray:
    sd = scores.std()
    return (scores - scores.mean()) / sd if sd > 0 else scores - scores.mean()


def build_weight_table(
    dataset: LongTailDataset, scorer: AnomalyScorer, standardize_scores: bool = False
) -> ClassWeightTable:
    """Score every class member and turn scores into sampling weights.

    Classes without a scorer get zero scores (unit weights). The head class is
    never oversampled whatever its weights, since its size already equals the target.
    """
    target = max(dataset.class_counts)
    table = {}
    for j in range(dataset.num_classes):
        idx = dataset.indices_of_class(j)
        if not idx:
            continue
        if not scorer.has(j):
            scores = np.zeros(len(idx))
        else:
            scores = scorer.score(j, dataset.stack(idx)["image"])
            if standardize_scores:
                scores = standardize(scores)
        anchor = median_anchor(scores)
        weights = np.array([aid_weight(s, anchor) for s in scores])
        table[j] = ClassWeights(idx, scores, anchor, weights)
    return ClassWeightTable(table, target)


def weight_table_from_rows(dataset: LongTailDataset, rows: Sequence[dict]) -> ClassWeightTable:
    """Rebuild a table from ``(sample_id, class, score, weight)`` rows."""
    pos = {sid: i for i, sid in enumerate(dataset.sample_ids)}
    grouped: dict[int, list[dict]] = {}
    for r in rows:
        if r["sample_id"] not in pos:
            raise ValidationError(f"weight row for unknown sample {r['sample_id']!r}")
        grouped.setdefault(int(r["class"]), []).append(r)
    table = {}
    for j, rs in grouped.items():
        scores = np.array([float(r["score"]) for r in rs])
        table[j] = ClassWeights(
            [pos[r["sample_id"]] for r in rs], scores, median_anchor(scores), np.array([float(r["weight"]) for r in rs])
        )
    return ClassWeightTable(table, max(dataset.class_counts))


def build_finetune_multiset(table: ClassWeightTable, rng: np.random.Generator) -> np.ndarray:
    """Dataset indices such that each class contributes exactly ``table.target`` entries."""
    parts = []
    for j in sorted(table.per_class):
        cw = table.per_class[j]
        local = oversample(cw.weights, table.target, rng)
        parts.append(np.asarray(cw.indices)[local])
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
