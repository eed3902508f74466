"""Keep the most in-distribution fraction of generated samples per class."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datamodel import clean_count
from .errors import ValidationError


@dataclass(frozen=True)
class FilterRow:
    label: int
    generated: int
    kept: int
    discarded: int
    threshold: float  # highest kept score; nan when nothing is kept
    gamma: float

    def to_dict(self) -> dict:
        return {
            "class": self.label,
            "generated": self.generated,
            "kept": self.kept,
            "discarded": self.discarded,
            "threshold": self.threshold,
            "gamma": self.gamma,
        }


def rank_by_score(sample_ids: Sequence[str], scores: Sequence[float]) -> list[int]:
    """Positions ordered by ascending score, ties broken by sample id."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(sample_ids):
        raise ValidationError("one score per sample required")
    if not np.all(np.isfinite(scores)):
        raise ValidationError("anomaly scores must be finite")
    return sorted(range(len(scores)), key=lambda i: (scores[i], sample_ids[i]))


def filter_class(
    sample_ids: Sequence[str], scores: Sequence[float], gamma: float, label: int = -1
) -> tuple[list[str], FilterRow]:
    """Keep the ``floor(gamma * n)`` lowest-scoring samples of one class."""
    if not 0.0 <= gamma <= 1.0:
        raise ValidationError(f"gamma must lie in [0, 1], got {gamma}")
    order = rank_by_score(sample_ids, scores)
    n = len(order)
    k = clean_count(gamma, n)
    kept = [sample_ids[i] for i in order[:k]]
    threshold = float(np.asarray(scores)[order[k - 1]]) if k else float("nan")
    return kept, FilterRow(label, n, k, n - k, threshold, gamma)
