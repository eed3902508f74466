import math

import numpy as np
import pytest
import torch
from scipy import stats

from lesionaug.errors import StateError, ValidationError
from lesionaug.selection import (
    AnomalyScorer,
    ReconstructionAE,
    aid_weight,
    build_finetune_multiset,
    build_weight_table,
    median_anchor,
    oversample,
    score_class,
    train_scorers,
    weight_table_from_rows,
)
from lesionaug.toydata import make_toy_arrays, toy_dataset


@pytest.mark.parametrize("scores,expected", [([1, 2, 3], 2), ([1, 2, 3, 4], 2.5), ([5], 5), ([3, 1, 2], 2)])
def test_median_anchor(scores, expected):
    assert median_anchor(scores) == expected


def test_median_anchor_empty():
    with pytest.raises(ValidationError):
        median_anchor([])


def test_weights_closed_form():
    assert aid_weight(0.4, 0.4) == 1.0
    assert abs(aid_weight(1.5, 0.5) - math.exp(-1)) < 1e-12
    assert abs(aid_weight(-0.5, 0.5) - 0.36787944117144233) < 1e-12
    w = aid_weight(10.0, 0.0)
    assert abs(w - 4.5399929762484854e-05) < 1e-12 and w > 0
    with pytest.raises(ValidationError):
        aid_weight(float("nan"), 0.0)


def test_weights_monotone_in_distance():
    d = np.linspace(0, 5, 50)
    w = [aid_weight(x, 0.0) for x in d]
    assert all(a > b for a, b in zip(w, w[1:]))


def test_oversample_target_equals_size_returns_identity():
    out = oversample([0.2, 1.0, 0.5], 3, np.random.default_rng(0))
    assert out.tolist() == [0, 1, 2]


def test_oversample_size_and_errors():
    rng = np.random.default_rng(0)
    assert len(oversample([1.0] * 7, 50, rng)) == 50
    with pytest.raises(ValidationError):
        oversample([1.0, 1.0], 1, rng)
    with pytest.raises(ValidationError):
        oversample([], 3, rng)
    with pytest.raises(ValidationError):
        oversample([1.0, 0.0], 3, rng)


def weighted_draw_pvalue(seed=0):
    """Two samples with weights (1, e^-1), 10^4 extra draws; two-sided binomial p-value."""
    extra = 10_000
    out = oversample([1.0, math.exp(-1)], 2 + extra, np.random.default_rng(seed))[2:]
    p = 1 / (1 + math.exp(-1))
    k = int((out == 0).sum())
    return k / extra, p, stats.binomtest(k, extra, p).pvalue


def uniform_draw_pvalue(seed=0, n=10):
    out = oversample([1.0] * n, n + 10_000, np.random.default_rng(seed))[n:]
    return stats.chisquare(np.bincount(out, minlength=n)).pvalue


def test_weighted_draw_frequency_binomial():
    frac, p, pvalue = weighted_draw_pvalue()
    assert abs(frac - p) < 3 * math.sqrt(p * (1 - p) / 10_000)
    assert pvalue > 0.01


def test_equal_weights_draws_uniform_chi_square():
    assert uniform_draw_pvalue() > 0.01


@pytest.fixture(scope="module")
def toy():
    return toy_dataset((60, 30, 12), size=16, seed=0)


@pytest.fixture(scope="module")
def scorer(toy):
    return train_scorers(toy, steps=150, seed=0)


def test_multiset_sizes(toy, scorer):
    table = build_weight_table(toy, scorer)
    idx = build_finetune_multiset(table, np.random.default_rng(0))
    labels = toy.labels[idx]
    for j in range(toy.num_classes):
        members = set(toy.indices_of_class(j))
        chosen = idx[labels == j]
        assert len(chosen) == toy.class_counts[0]
        assert members <= set(chosen.tolist())
    rows = table.rows(toy)
    rebuilt = weight_table_from_rows(toy, rows)
    a = build_finetune_multiset(table, np.random.default_rng(5))
    b = build_finetune_multiset(rebuilt, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_scorer_state_round_trip(toy, scorer):
    back = AnomalyScorer.from_state(scorer.state())
    x = toy.stack(range(5))["image"]
    assert np.array_equal(back.score(0, x), scorer.score(0, x))
    assert back.trained_on == scorer.trained_on


def test_scores_pointwise_and_untrained_model():
    model = ReconstructionAE(3, 16, 4)
    x = torch.rand(3, 3, 16, 16)
    s = score_class(torch.cat([x, x]), model)
    assert np.array_equal(s[:3], s[3:])
    model.trained = False
    with pytest.raises(StateError):
        score_class(x, model)
    with pytest.raises(StateError):
        AnomalyScorer().score(0, x)


def test_perfect_reconstruction_scores_zero():
    class Identity(torch.nn.Module):
        def forward(self, x):
            return x

    assert np.all(score_class(torch.rand(4, 3, 8, 8), Identity()) == 0)


def test_missing_scorer_gives_unit_weights(toy):
    table = build_weight_table(toy, AnomalyScorer())
    for cw in table.per_class.values():
        assert np.all(cw.weights == 1.0)


def cross_class_margin(seed=0):
    """Mean score of held-out foreign-class images minus held-out own-class images, per scorer."""
    ds = toy_dataset((150, 150, 150, 150), size=16, seed=seed)
    scorer = train_scorers(ds, steps=600, seed=seed)
    x, y = make_toy_arrays([100] * 4, size=16, seed=seed + 1000)
    margins = []
    for j in range(4):
        s = scorer.score(j, x)
        margins.append(float(s[(y != j).numpy()].mean() - s[(y == j).numpy()].mean()))
    return margins


def test_scorer_prefers_own_class():
    assert all(m > 0 for m in cross_class_margin())
