"""Plain CNN classifier trained with unweighted cross-entropy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_container, save_container
from .datamodel import LabeledSample
from .errors import TrainingError, ValidationError

logger = logging.getLogger(__name__)


class SmallCNN(nn.Module):
    def __init__(self, num_classes: int, channels: int = 3, width: int = 16):
        super().__init__()
        self.config = dict(num_classes=num_classes, channels=channels, width=width)
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(channels, w, 3, padding=1), nn.SiLU(), nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.SiLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 4 * w, 3, padding=1), nn.SiLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.head = nn.Linear(4 * w, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass
class ClassifierCheckpoint:
    model: SmallCNN
    num_classes: int
    config: dict
    loss_history: list[float] = field(default_factory=list)


def _interleaved_order(n_real: int, n_syn: int, rngs: tuple[np.random.Generator, ...]) -> np.ndarray:
    """One epoch of indices; real samples keep the same relative order whatever ``n_syn`` is."""
    rng_real, rng_syn, rng_mix = rngs
    real = rng_real.permutation(n_real)
    if n_syn == 0:
        return real
    syn = n_real + rng_syn.permutation(n_syn)
    is_syn = rng_mix.permutation(np.r_[np.zeros(n_real, bool), np.ones(n_syn, bool)])
    order = np.empty(n_real + n_syn, dtype=np.int64)
    order[~is_syn] = real
    order[is_syn] = syn
    return order


def train_classifier(
    real: Sequence[LabeledSample],
    num_classes: int,
    steps: int,
    lr: float = 2e-3,
    batch_size: int = 64,
    width: int = 16,
    seed: int = 0,
    synthetic: Sequence[LabeledSample] = (),
) -> ClassifierCheckpoint:
    """Cross-entropy training on ``real`` plus optional ``synthetic`` samples.

    Initialisation and the order of real samples depend only on ``seed``, so a
    run with no synthetic samples is identical to the baseline.
    """
    if not real:
        raise ValidationError("empty training set")
    samples = list(real) + list(synthetic)
    for s in samples:
        if not 0 <= s.label < num_classes:
            raise ValidationError(f"{s.sample_id}: label {s.label} outside 0..{num_classes - 1}")
    images = torch.stack([s.image for s in samples])
    labels = torch.tensor([s.label for s in samples], dtype=torch.long)

    torch.manual_seed(seed)
    model = SmallCNN(num_classes, images.shape[1], width)
    ckpt = ClassifierCheckpoint(model, num_classes, dict(steps=steps, lr=lr, batch_size=batch_size, seed=seed))
    if steps == 0:
        model.eval()
        return ckpt

    seq = np.random.SeedSequence(seed).spawn(4)
    rngs = tuple(np.random.default_rng(s) for s in seq[:3])
    flip_rng = np.random.default_rng(seq[3])
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    order = _interleaved_order(len(real), len(synthetic), rngs)
    pos = 0
    model.train()
    for step in range(steps):
        if pos >= len(order):
            order = _interleaved_order(len(real), len(synthetic), rngs)
            pos = 0
        idx = torch.from_numpy(order[pos : pos + batch_size])
        pos += batch_size
        x = images[idx]
        flip = torch.from_numpy(flip_rng.random(len(idx)) < 0.5)
        x = torch.where(flip[:, None, None, None], x.flip(-1), x)
        loss = F.cross_entropy(model(x), labels[idx])
        if not torch.isfinite(loss):
            raise TrainingError("classifier loss is not finite", step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        ckpt.loss_history.append(loss.item())
    model.eval()
    return ckpt


@torch.no_grad()
def logits(ckpt: ClassifierCheckpoint, images: torch.Tensor) -> torch.Tensor:
    expected = ckpt.model.config["channels"]
    if images.ndim != 4 or images.shape[1] != expected:
        raise ValidationError(f"expected N x {expected} x H x W images, got {tuple(images.shape)}")
    return torch.cat([ckpt.model(images[i : i + 1024]) for i in range(0, len(images), 1024)])


def argmax_lowest(scores: torch.Tensor) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    scores = scores.detach().cpu().double().numpy()
    return np.argmax(scores, axis=1)


def predict(ckpt: ClassifierCheckpoint, images: torch.Tensor) -> np.ndarray:
    return argmax_lowest(logits(ckpt, images))


def save_classifier(path, ckpt: ClassifierCheckpoint) -> None:
    save_container(
        path,
        "classifier",
        {"model": {"config": ckpt.model.config, "state": ckpt.model.state_dict()}, "num_classes": ckpt.num_classes,
         "config": ckpt.config, "loss_history": ckpt.loss_history},
    )


def load_classifier(path) -> ClassifierCheckpoint:
    payload = load_container(path, "classifier")
    model = SmallCNN(**payload["model"]["config"])
    model.load_state_dict(payload["model"]["state"])
    return ClassifierCheckpoint(model.eval(), payload["num_classes"], payload["config"], payload["loss_history"])
