"""Procedural long-tailed "lesion on skin" images for desk-scale runs.

Each image is a skin-toned background with a darker elliptical lesion. The
class is carried by the lesion's colour and texture, with class distributions
overlapping enough that a classifier trained on imbalanced data favours the
head classes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .io import write_image, write_jsonl

TOY_COUNTS = (2000, 500, 100, 20)

# lesion mean RGB per class; extra classes cycle with a shift
_LESION_COLOURS = np.array(
    [
        [0.46, 0.30, 0.22],
        [0.34, 0.22, 0.26],
        [0.48, 0.22, 0.30],
        [0.34, 0.30, 0.36],
    ]
)
# stripe amplitude per class
_TEXTURE = np.array([0.00, 0.05, 0.00, 0.05])


def toy_image(label: int, rng: np.random.Generator, size: int = 16, colour_jitter: float = 0.05) -> np.ndarray:
    """One 3 x size x size image in [0, 1]."""
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    skin = np.array([0.86, 0.70, 0.60]) + rng.normal(0, 0.035, 3)
    grad = rng.normal(0, 0.03) * (xx - size / 2) / size + rng.normal(0, 0.03) * (yy - size / 2) / size
    img = skin[:, None, None] + grad[None] + rng.normal(0, 0.015, (3, size, size))

    c = label % len(_LESION_COLOURS)
    colour = _LESION_COLOURS[c] + 0.03 * (label // len(_LESION_COLOURS)) + rng.normal(0, colour_jitter, 3)
    cy, cx = size / 2 - 0.5 + rng.uniform(-2, 2, 2)
    ry, rx = rng.uniform(2.8, 4.8, 2)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    r = (u / rx) ** 2 + (v / ry) ** 2
    inside = r <= 1.0
    stripes = _TEXTURE[c] * np.sin(2.2 * u + rng.uniform(0, 2 * np.pi))
    lesion = colour[:, None, None] + stripes[None] + rng.normal(0, 0.02, (3, size, size))
    img = np.where(inside[None], lesion, img)
    return np.clip(img, 0.0, 1.0)


def make_toy_arrays(
    counts: Sequence[int] = TOY_COUNTS, size: int = 16, seed: int = 0, colour_jitter: float = 0.05
) -> tuple[torch.Tensor, torch.Tensor]:
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label, n in enumerate(counts):
        for _ in range(n):
            images.append(toy_image(label, rng, size, colour_jitter))
            labels.append(label)
    # quantise like an 8-bit PNG round trip so in-memory and on-disk datasets agree
    x = torch.from_numpy(np.round(np.stack(images) * 255) / 255).float()
    return x, torch.tensor(labels)


def toy_dataset(counts: Sequence[int] = TOY_COUNTS, size: int = 16, seed: int = 0, segmenter=None):
    """In-memory :class:`LongTailDataset` with segmented masks."""
    from .datamodel import LabeledSample, LongTailDataset
    from .segmentation import segment

    images, labels = make_toy_arrays(counts, size, seed)
    samples = [
        LabeledSample.create(img, int(y), segment(img, segmenter), f"toy{i:05d}")
        for i, (img, y) in enumerate(zip(images, labels))
    ]
    return LongTailDataset.from_samples(samples, len(counts))


def write_toy_dataset(
    out_dir: str | Path, counts: Sequence[int] = TOY_COUNTS, size: int = 16, seed: int = 0
) -> Path:
    """Write PNGs plus ``manifest.jsonl`` (no masks: the loader segments)."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    images, labels = make_toy_arrays(counts, size, seed)
    records: list[dict] = [{"classes": [f"class{j}" for j in range(len(counts))]}]
    for i, (img, y) in enumerate(zip(images, labels)):
        rel = f"images/toy{i:05d}.png"
        write_image(out_dir / rel, img)
        records.append({"sample_id": f"toy{i:05d}", "image_path": rel, "label": int(y)})
    path = out_dir / "manifest.jsonl"
    write_jsonl(path, records)
    return path
