"""Long-tailed dataset formalism: samples, class ordering, budgets, folds."""

from __future__ import annotations

import dataclasses
import logging
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.model_selection import StratifiedKFold

from .errors import ValidationError
from .io import read_image, read_jsonl, read_mask
from .segmentation import SegmenterParams, make_background, segment

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LabeledSample:
    image: torch.Tensor
    label: int
    mask: torch.Tensor
    background: torch.Tensor
    sample_id: str
    source: str = "real"

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise ValidationError(f"{self.sample_id}: expected C x H x W image and 1 x H x W mask")
        if self.image.shape[-2:] != self.mask.shape[-2:] or self.background.shape != self.image.shape:
            raise ValidationError(f"{self.sample_id}: image, mask and background shapes differ")
        if not torch.all((self.mask == 0) | (self.mask == 1)):
            raise ValidationError(f"{self.sample_id}: mask values must be 0 or 1")
        outside = (self.mask == 0).expand_as(self.image)
        if not torch.equal(self.background[outside], self.image[outside]):
            raise ValidationError(f"{self.sample_id}: background differs from image outside the mask")

    @classmethod
    def create(cls, image: torch.Tensor, label: int, mask: torch.Tensor, sample_id: str, source: str = "real"):
        return cls(image, int(label), mask, make_background(image, mask), sample_id, source)


def clean_count(gamma: float, n: int) -> int:
    """floor(gamma * n), exact for decimal gamma values such as 0.3."""
    return int(Fraction(str(gamma)) * n // 1)


@dataclass(frozen=True)
class LongTailDataset:
    """Samples relabelled so that class 0 is the head: counts[0] >= counts[1] >= ...

    ``class_ids[k]`` is the original manifest label of class k. Subsets keep the
    parent's class indexing.
    """

    samples: tuple[LabeledSample, ...]
    class_counts: tuple[int, ...]
    class_ids: tuple[int, ...]
    class_names: tuple[str, ...] | None = None

    @property
    def num_classes(self) -> int:
        return len(self.class_counts)

    @property
    def total(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def sample_ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    def __len__(self) -> int:
        return len(self.samples)

    @classmethod
    def from_samples(
        cls,
        samples: Sequence[LabeledSample],
        num_classes: int | None = None,
        class_names: Sequence[str] | None = None,
    ) -> LongTailDataset:
        """Sort classes by descending count (ties: original id) and relabel."""
        if not samples:
            raise ValidationError("dataset is empty")
        if num_classes is None:
            num_classes = len(class_names) if class_names is not None else max(s.label for s in samples) + 1
        for s in samples:
            if not 0 <= s.label < num_classes:
                raise ValidationError(f"{s.sample_id}: label {s.label} outside class set 0..{num_classes - 1}")
        ids = [s.sample_id for s in samples]
        if len(set(ids)) != len(ids):
            dup = next(k for k, v in Counter(ids).items() if v > 1)
            raise ValidationError(f"duplicate sample_id {dup!r}")

        counts = Counter(s.label for s in samples)
        order = sorted(range(num_classes), key=lambda c: (-counts.get(c, 0), c))
        remap = {orig: new for new, orig in enumerate(order)}
        relabelled = tuple(dataclasses.replace(s, label=remap[s.label]) for s in samples)
        names = tuple(class_names[c] for c in order) if class_names is not None else None
        return cls(relabelled, tuple(counts.get(c, 0) for c in order), tuple(order), names)

    def subset(self, indices: Sequence[int]) -> LongTailDataset:
        chosen = tuple(self.samples[i] for i in indices)
        counts = Counter(s.label for s in chosen)
        return LongTailDataset(
            chosen, tuple(counts.get(c, 0) for c in range(self.num_classes)), self.class_ids, self.class_names
        )

    def with_extra(self, extra: Sequence[LabeledSample]) -> LongTailDataset:
        """Union with additional (synthetic) samples; class indexing unchanged."""
        combined = self.samples + tuple(extra)
        counts = Counter(s.label for s in combined)
        return LongTailDataset(
            combined, tuple(counts.get(c, 0) for c in range(self.num_classes)), self.class_ids, self.class_names
        )

    def indices_of_class(self, label: int) -> list[int]:
        return [i for i, s in enumerate(self.samples) if s.label == label]

    def stack(self, indices: Sequence[int] | None = None) -> dict[str, torch.Tensor]:
        chosen = self.samples if indices is None else [self.samples[i] for i in indices]
        return {
            "image": torch.stack([s.image for s in chosen]),
            "mask": torch.stack([s.mask for s in chosen]),
            "background": torch.stack([s.background for s in chosen]),
            "label": torch.tensor([s.label for s in chosen], dtype=torch.long),
        }


@dataclass(frozen=True)
class SyntheticBudget:
    per_class_raw: dict[int, int]
    gamma: float
    per_class_clean: dict[int, int]

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "per_class_raw": {str(k): v for k, v in self.per_class_raw.items()},
            "per_class_clean": {str(k): v for k, v in self.per_class_clean.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> SyntheticBudget:
        return cls(
            {int(k): int(v) for k, v in data["per_class_raw"].items()},
            float(data["gamma"]),
            {int(k): int(v) for k, v in data["per_class_clean"].items()},
        )


def compute_budget(dataset: LongTailDataset, gamma: float) -> SyntheticBudget:
    """Raw budget ``max(0, |c_1| - |c_j|)`` and clean budget ``floor(gamma * raw)``."""
    if dataset.total == 0:
        raise ValidationError("dataset is empty")
    if not 0.0 <= gamma <= 1.0:
        raise ValidationError(f"gamma must lie in [0, 1], got {gamma}")
    head = dataset.class_counts[0]
    raw = {j: max(0, head - n) for j, n in enumerate(dataset.class_counts)}
    return SyntheticBudget(raw, gamma, {j: clean_count(gamma, r) for j, r in raw.items()})


def stratified_kfold(dataset: LongTailDataset, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    if k < 2:
        raise ValidationError("k must be >= 2")
    for j, n in enumerate(dataset.class_counts):
        if n < k:
            name = dataset.class_names[j] if dataset.class_names else f"class {j} (id {dataset.class_ids[j]})"
            raise ValidationError(f"{name} has {n} samples, fewer than k={k} folds")
    skf = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    labels = dataset.labels
    return [(np.sort(tr), np.sort(te)) for tr, te in skf.split(np.zeros(len(labels)), labels)]


def load_manifest(
    path: str | Path,
    num_classes: int | None = None,
    segmenter: SegmenterParams | None = None,
) -> LongTailDataset:
    """Load a JSONL manifest of ``{sample_id, image_path, mask_path?, label}`` records.

    An optional header record ``{"classes": [...]}`` declares the class set. Relative
    paths resolve against the manifest's directory. Missing masks are segmented.
    """
    path = Path(path)
    records = read_jsonl(path)
    class_names = None
    if records and "classes" in records[0]:
        class_names = [str(c) for c in records[0]["classes"]]
        records = records[1:]
        num_classes = len(class_names)
    if not records:
        raise ValidationError(f"manifest {path} has no samples")

    base = path.parent
    image_cache: dict[Path, torch.Tensor] = {}
    samples = []
    for i, rec in enumerate(records):
        try:
            image_path = base / rec["image_path"]
            label = rec["label"]
        except KeyError as exc:
            raise ValidationError(f"{path} record {i}: missing field {exc}") from exc
        if not isinstance(label, int) or label < 0 or (num_classes is not None and label >= num_classes):
            raise ValidationError(f"{path} record {i}: label {label!r} outside declared class set")
        if image_path not in image_cache:
            image_cache[image_path] = read_image(image_path)
        image = image_cache[image_path]
        if rec.get("mask_path"):
            mask = read_mask(base / rec["mask_path"])
        else:
            mask = segment(image, segmenter)
        sample_id = str(rec.get("sample_id", i))
        samples.append(LabeledSample.create(image, label, mask, sample_id, rec.get("source", "real")))
    ds = LongTailDataset.from_samples(samples, num_classes, class_names)
    logger.info("loaded %d samples in %d classes from %s", ds.total, ds.num_classes, path)
    return ds


def load_aligned_samples(path: str | Path, class_ids: Sequence[int]) -> list[LabeledSample]:
    """Load manifest records whose labels are original class ids into an existing indexing.

    Used for generated-sample manifests, whose class counts would otherwise
    reorder the classes. Records must carry a mask path.
    """
    path = Path(path)
    records = [r for r in read_jsonl(path) if "classes" not in r]
    index = {cid: k for k, cid in enumerate(class_ids)}
    out = []
    for i, rec in enumerate(records):
        if rec.get("label") not in index:
            raise ValidationError(f"{path} record {i}: label {rec.get('label')!r} outside declared class set")
        if not rec.get("mask_path"):
            raise ValidationError(f"{path} record {i}: mask_path is required")
        image = read_image(path.parent / rec["image_path"])
        mask = read_mask(path.parent / rec["mask_path"])
        sid = str(rec.get("sample_id", f"{path.stem}-{i}"))
        out.append(LabeledSample.create(image, index[rec["label"]], mask, sid, rec.get("source", "synthetic")))
    return out
