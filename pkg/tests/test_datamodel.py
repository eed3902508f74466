import json

import numpy as np
import pytest
import torch
from PIL import Image

from lesionaug.datamodel import (
    LabeledSample,
    LongTailDataset,
    clean_count,
    compute_budget,
    load_aligned_samples,
    load_manifest,
    stratified_kfold,
)
from lesionaug.errors import LoadError, ValidationError
from lesionaug.io import write_mask

from oracles import floor_fraction

ISIC = {"MEL": 4522, "NV": 12875, "BCC": 3323, "AKIEC": 867, "BKL": 2624, "DF": 239, "VASC": 253, "SCC": 628}


def _sample(label, sid, size=4):
    img = torch.full((3, size, size), 0.5)
    mask = torch.zeros(1, size, size)
    mask[:, 1:3, 1:3] = 1
    return LabeledSample.create(img, label, mask, sid)


def _dataset(counts):
    samples = [_sample(c, f"c{c}-{i}") for c, n in enumerate(counts) for i in range(n)]
    return LongTailDataset.from_samples(samples, len(counts))


@pytest.fixture(scope="module")
def isic_manifest(tmp_path_factory):
    # one tiny image referenced by every record keeps this fast
    root = tmp_path_factory.mktemp("isic")
    Image.fromarray(np.full((4, 4, 3), 200, np.uint8)).save(root / "px.png")
    mask = torch.zeros(1, 4, 4)
    mask[:, 1:3, 1:3] = 1
    write_mask(root / "m.png", mask)
    names = list(ISIC)
    lines = [json.dumps({"classes": names})]
    k = 0
    for c, name in enumerate(names):
        for _ in range(ISIC[name]):
            lines.append(json.dumps({"sample_id": f"s{k}", "image_path": "px.png", "mask_path": "m.png", "label": c}))
            k += 1
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return root / "manifest.jsonl"


def test_isic_counts_sorted(isic_manifest):
    ds = load_manifest(isic_manifest)
    assert list(ds.class_counts) == [12875, 4522, 3323, 2624, 867, 628, 253, 239]
    assert ds.total == 25331
    assert ds.class_names[0] == "NV" and ds.class_names[-1] == "DF"


def test_isic_budgets(isic_manifest):
    ds = load_manifest(isic_manifest)
    b = compute_budget(ds, 0.5)
    idx = {name: k for k, name in enumerate(ds.class_names)}
    assert b.per_class_raw[idx["MEL"]] == 8353
    assert b.per_class_raw[idx["NV"]] == 0 and b.per_class_clean[idx["NV"]] == 0
    assert b.per_class_raw[idx["DF"]] == 12636
    assert b.per_class_clean[idx["DF"]] == 6318
    for j, n in enumerate(ds.class_counts):
        assert b.per_class_raw[j] + n == ds.class_counts[0]


@pytest.mark.parametrize("gamma", ["0.1", "0.3", "0.7", "0.9", "0.35"])
def test_clean_count_matches_exact_floor(gamma):
    for n in range(0, 2000, 7):
        assert clean_count(float(gamma), n) == floor_fraction(gamma, n)


def test_budget_rejects_bad_gamma():
    with pytest.raises(ValidationError):
        compute_budget(_dataset([3, 1]), 1.5)


def test_reorder_by_count_and_id():
    samples = [_sample(0, f"a{i}") for i in range(3)] + [_sample(1, f"b{i}") for i in range(10)]
    samples += [_sample(2, f"c{i}") for i in range(3)]
    ds = LongTailDataset.from_samples(samples, 3)
    assert ds.class_counts == (10, 3, 3)
    assert ds.class_ids == (1, 0, 2)
    assert sorted(ds.class_counts) == sorted([3, 10, 3])


def test_duplicate_ids_and_bad_labels_rejected():
    with pytest.raises(ValidationError, match="duplicate"):
        LongTailDataset.from_samples([_sample(0, "x"), _sample(0, "x")])
    with pytest.raises(ValidationError):
        LongTailDataset.from_samples([_sample(3, "x")], 2)
    with pytest.raises(ValidationError):
        LongTailDataset.from_samples([])


def test_sample_invariants():
    img = torch.rand(3, 4, 4)
    mask = torch.zeros(1, 4, 4)
    with pytest.raises(ValidationError):
        LabeledSample(img, 0, mask, torch.zeros_like(img), "bad")
    with pytest.raises(ValidationError):
        LabeledSample.create(img, 0, mask + 0.5, "bad")


def test_manifest_errors(tmp_path):
    with pytest.raises(LoadError):
        load_manifest(tmp_path / "missing.jsonl")
    (tmp_path / "empty.jsonl").write_text("")
    with pytest.raises(ValidationError):
        load_manifest(tmp_path / "empty.jsonl")
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "a.png")
    (tmp_path / "m.jsonl").write_text(
        json.dumps({"classes": ["x", "y"]}) + "\n" + json.dumps({"image_path": "a.png", "label": 5}) + "\n"
    )
    with pytest.raises(ValidationError, match="class set"):
        load_manifest(tmp_path / "m.jsonl")
    Image.fromarray(np.full((4, 4), 7, np.uint8)).save(tmp_path / "gray.png")
    (tmp_path / "n.jsonl").write_text(json.dumps({"image_path": "a.png", "mask_path": "gray.png", "label": 0}) + "\n")
    with pytest.raises(ValidationError):
        load_manifest(tmp_path / "n.jsonl")


def test_manifest_small_counts(tmp_path):
    Image.fromarray(np.full((8, 8, 3), 220, np.uint8)).save(tmp_path / "a.png")
    recs = [{"sample_id": f"s{i}", "image_path": "a.png", "label": int(i >= 10)} for i in range(13)]
    (tmp_path / "m.jsonl").write_text("".join(json.dumps(r) + "\n" for r in recs))
    ds = load_manifest(tmp_path / "m.jsonl")
    assert ds.class_counts == (10, 3) and ds.total == 13
    # segmentation ran because no masks were given
    assert all(s.mask.sum() > 0 for s in ds.samples)


def test_aligned_samples_keep_parent_indexing(tmp_path):
    Image.fromarray(np.full((4, 4, 3), 90, np.uint8)).save(tmp_path / "g.png")
    mask = torch.zeros(1, 4, 4)
    write_mask(tmp_path / "gm.png", mask)
    rec = {"sample_id": "g0", "image_path": "g.png", "mask_path": "gm.png", "label": 7}
    (tmp_path / "gen.jsonl").write_text(json.dumps(rec) + "\n")
    out = load_aligned_samples(tmp_path / "gen.jsonl", [3, 7])
    assert out[0].label == 1 and out[0].source == "synthetic"
    with pytest.raises(ValidationError):
        load_aligned_samples(tmp_path / "gen.jsonl", [3])


def test_kfold_even_split():
    folds = stratified_kfold(_dataset([10]), 5, seed=0)
    assert [len(te) for _, te in folds] == [2] * 5


def test_kfold_proportional_and_covering():
    ds = _dataset([10, 5])
    folds = stratified_kfold(ds, 5, seed=3)
    seen = np.concatenate([te for _, te in folds])
    assert sorted(seen.tolist()) == list(range(15))
    for tr, te in folds:
        assert set(tr).isdisjoint(te)
        lab = ds.labels[te]
        assert (lab == 0).sum() == 2 and (lab == 1).sum() == 1


def test_kfold_fold_sizes_differ_by_at_most_one():
    ds = _dataset([23, 11, 7])
    folds = stratified_kfold(ds, 5, seed=1)
    for c in range(3):
        sizes = [int((ds.labels[te] == c).sum()) for _, te in folds]
        assert max(sizes) - min(sizes) <= 1


def test_kfold_deterministic_and_small_class_error():
    ds = _dataset([10, 5])
    a = stratified_kfold(ds, 5, seed=7)
    b = stratified_kfold(ds, 5, seed=7)
    assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    with pytest.raises(ValidationError, match="class 1"):
        stratified_kfold(_dataset([10, 3]), 5, seed=0)
