"""Independent reference implementations used by the tests.

Deliberately written with plain loops and no shared code with the package.
"""

from __future__ import annotations

import math
from fractions import Fraction

import mpmath


def brute_force_metrics(cm):
    """One-vs-rest macro metrics computed cell by cell."""
    m = len(cm)
    total = sum(sum(row) for row in cm)
    recalls, specs, f1s = [], [], []
    for k in range(m):
        tp = cm[k][k]
        fn = sum(cm[k][c] for c in range(m) if c != k)
        fp = sum(cm[r][k] for r in range(m) if r != k)
        tn = total - tp - fn - fp
        recall = tp / (tp + fn) if tp + fn else 0.0
        precision = tp / (tp + fp) if tp + fp else 0.0
        spec = tn / (tn + fp) if tn + fp else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        recalls.append(recall)
        specs.append(spec)
        f1s.append(f1)
    return {
        "bma": sum(recalls) / m,
        "sensitivity": sum(recalls) / m,
        "specificity": sum(specs) / m,
        "f1": sum(f1s) / m,
    }


def alpha_bar_extended(T: int, beta_start: str, beta_end: str, dps: int = 50) -> list:
    """Cumulative product of (1 - beta) in extended precision with exact linear betas."""
    mpmath.mp.dps = dps
    b0, b1 = Fraction(beta_start), Fraction(beta_end)
    out, prod = [], mpmath.mpf(1)
    for i in range(T):
        beta = b0 + (b1 - b0) * Fraction(i, T - 1) if T > 1 else b0
        prod *= 1 - mpmath.mpf(beta.numerator) / beta.denominator
        out.append(prod)
    return out


def floor_fraction(gamma: str, n: int) -> int:
    return math.floor(Fraction(gamma) * n)
