import math

import numpy as np
import pytest

from lesionaug.errors import ValidationError
from lesionaug.oodfilter import filter_class, rank_by_score

from oracles import floor_fraction

GAMMAS = [f"{k / 10:.1f}" for k in range(11)]


def test_scores_one_to_ten():
    ids = [f"s{k:02d}" for k in range(10)]
    scores = [7, 1, 10, 3, 2, 9, 8, 5, 4, 6]
    kept, row = filter_class(ids, scores, 0.3, label=2)
    assert sorted(kept) == ["s01", "s03", "s04"]
    assert (row.generated, row.kept, row.discarded, row.threshold) == (10, 3, 7, 3.0)


def test_extremes():
    ids = list("abcde")
    assert filter_class(ids, [1, 2, 3, 4, 5], 1.0)[0] == ids
    kept, row = filter_class(ids, [1, 2, 3, 4, 5], 0.0)
    assert kept == [] and math.isnan(row.threshold)


def kept_counts_and_nesting(n=37, seed=0):
    rng = np.random.default_rng(seed)
    ids = [f"g{k}" for k in range(n)]
    scores = rng.normal(size=n)
    out = []
    for g in GAMMAS:
        kept, _ = filter_class(ids, scores, float(g))
        out.append((g, len(kept), floor_fraction(g, n), set(kept)))
    return out


@pytest.mark.parametrize("n", [1, 7, 10, 37, 100, 1001])
def test_kept_count_floor_and_nested(n):
    rows = kept_counts_and_nesting(n)
    for g, got, expected, _ in rows:
        assert got == expected, g
    for (_, _, _, a), (_, _, _, b) in zip(rows, rows[1:]):
        assert a <= b


def test_ties_broken_by_id():
    assert rank_by_score(["b", "a", "c"], [1.0, 1.0, 0.5]) == [2, 1, 0]


def test_errors():
    with pytest.raises(ValidationError):
        filter_class(["a"], [1.0], 1.1)
    with pytest.raises(ValidationError):
        filter_class(["a", "b"], [1.0], 0.5)
    with pytest.raises(ValidationError):
        filter_class(["a"], [float("nan")], 0.5)
