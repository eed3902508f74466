import numpy as np
import pytest
import torch

from lesionaug.classifier import (
    SmallCNN,
    argmax_lowest,
    load_classifier,
    logits,
    predict,
    save_classifier,
    train_classifier,
)
from lesionaug.datamodel import LabeledSample
from lesionaug.errors import ValidationError
from lesionaug.toydata import toy_dataset


def _samples(n, label, seed=0, prefix="r"):
    gen = torch.Generator().manual_seed(seed)
    mask = torch.zeros(1, 8, 8)
    return [LabeledSample.create(torch.rand(3, 8, 8, generator=gen), label, mask, f"{prefix}{label}-{i}") for i in range(n)]


def test_single_class_always_predicted():
    real = _samples(20, 0)
    ckpt = train_classifier(real, 1, steps=5, seed=0)
    x = torch.stack([s.image for s in real])
    assert (predict(ckpt, x) == 0).all()


def test_zero_steps_is_initialisation():
    real = _samples(10, 0) + _samples(10, 1, seed=1)
    a = train_classifier(real, 2, steps=0, seed=3)
    torch.manual_seed(3)
    fresh = SmallCNN(2, 3, 16)
    for x, y in zip(a.model.state_dict().values(), fresh.state_dict().values()):
        assert torch.equal(x, y)
    assert a.loss_history == []


def test_argmax_ties_go_to_lowest_index():
    assert argmax_lowest(torch.zeros(2, 4)).tolist() == [0, 0]
    assert argmax_lowest(torch.tensor([[0.0, 3.0, 3.0, 1.0], [5.0, 1.0, 2.0, 7.0]])).tolist() == [1, 3]


def test_no_synthetic_is_bitwise_baseline():
    real = _samples(30, 0) + _samples(30, 1, seed=1)
    a = train_classifier(real, 2, steps=20, batch_size=8, seed=5)
    b = train_classifier(real, 2, steps=20, batch_size=8, seed=5, synthetic=())
    for x, y in zip(a.model.state_dict().values(), b.model.state_dict().values()):
        assert torch.equal(x, y)


def test_synthetic_changes_training():
    real = _samples(30, 0) + _samples(30, 1, seed=1)
    syn = _samples(10, 1, seed=2, prefix="s")
    a = train_classifier(real, 2, steps=20, batch_size=8, seed=5)
    b = train_classifier(real, 2, steps=20, batch_size=8, seed=5, synthetic=syn)
    assert any(not torch.equal(x, y) for x, y in zip(a.model.state_dict().values(), b.model.state_dict().values()))


def test_deterministic_inference_and_round_trip(tmp_path):
    real = _samples(20, 0) + _samples(20, 1, seed=1)
    ckpt = train_classifier(real, 2, steps=10, seed=0)
    x = torch.stack([s.image for s in real])
    assert torch.equal(logits(ckpt, x), logits(ckpt, x))
    save_classifier(tmp_path / "c.pt", ckpt)
    back = load_classifier(tmp_path / "c.pt")
    assert torch.equal(logits(back, x), logits(ckpt, x))
    with pytest.raises(ValidationError):
        logits(ckpt, torch.zeros(2, 1, 8, 8))


def test_label_validation():
    with pytest.raises(ValidationError):
        train_classifier(_samples(3, 2), 2, steps=1)
    with pytest.raises(ValidationError):
        train_classifier([], 2, steps=1)


def baseline_recalls(seed=0, steps=600):
    """Per-class recall of a real-data-only classifier on the toy long-tail set (one 80/20 split)."""
    from lesionaug.datamodel import stratified_kfold
    from lesionaug.metrics import per_class_recall, confusion

    ds = toy_dataset(seed=seed)
    tr, te = stratified_kfold(ds, 5, seed)[0]
    ckpt = train_classifier([ds.samples[i] for i in tr], ds.num_classes, steps, seed=seed)
    test = ds.stack(te)
    return per_class_recall(confusion(test["label"].numpy(), predict(ckpt, test["image"]), ds.num_classes))


def test_imbalance_hurts_tail_recall():
    rec = baseline_recalls()
    assert rec[-1] < rec[0] - 0.3


def test_training_accuracy_above_chance():
    ds = toy_dataset((60, 60, 60), size=16, seed=0)
    ckpt = train_classifier(list(ds.samples), 3, steps=150, seed=0)
    st = ds.stack()
    assert (predict(ckpt, st["image"]) == st["label"].numpy()).mean() > 1 / 3
