import numpy as np
import pytest
import torch

from lesionaug.errors import ValidationError
from lesionaug.segmentation import SegmenterParams, fallback_mask, make_background, rescale_mask, segment


def _disk_image(size=32, radius=8.0, cy=14.0, cx=17.0, skin=0.85, lesion=0.3, noise=0.02, seed=0):
    yy, xx = np.mgrid[:size, :size]
    disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    rng = np.random.default_rng(seed)
    img = np.where(disk, lesion, skin)[None].repeat(3, 0) + rng.normal(0, noise, (3, size, size))
    return torch.from_numpy(np.clip(img, 0, 1)).float(), disk


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("mode", ["otsu", "fixed"])
def test_dark_disk_recovered(seed, mode):
    rng = np.random.default_rng(100 + seed)
    img, disk = _disk_image(radius=rng.uniform(5, 10), cy=rng.uniform(12, 20), cx=rng.uniform(12, 20), seed=seed)
    mask = segment(img, SegmenterParams(threshold_mode=mode)).numpy()[0].astype(bool)
    iou = (mask & disk).sum() / (mask | disk).sum()
    assert iou >= 0.9


def test_constant_image_falls_back():
    mask = segment(torch.ones(3, 16, 16))
    assert torch.equal(mask, fallback_mask(16, 16))
    assert mask.mean().item() == pytest.approx(0.25, abs=0.05)


def test_tiny_region_falls_back():
    img = torch.ones(3, 32, 32)
    img[:, 3, 3] = 0.0
    assert torch.equal(segment(img, SegmenterParams(morphological_radius=0)), fallback_mask(32, 32))


def test_mask_binary_on_random_input():
    gen = torch.Generator().manual_seed(0)
    for _ in range(20):
        mask = segment(torch.rand(3, 16, 16, generator=gen))
        assert mask.shape == (1, 16, 16)
        assert torch.all((mask == 0) | (mask == 1))


def test_bad_params_and_shapes():
    with pytest.raises(ValidationError):
        SegmenterParams(threshold_mode="magic")
    with pytest.raises(ValidationError):
        segment(torch.rand(16, 16))


def test_background_identities():
    img = torch.rand(3, 4, 4)
    assert torch.equal(make_background(img, torch.zeros(1, 4, 4)), img)
    assert torch.equal(make_background(img, torch.ones(1, 4, 4)), torch.zeros(3, 4, 4))
    half = torch.zeros(1, 4, 4)
    half[:, :, :2] = 1
    bg = make_background(img, half)
    assert torch.all(bg[:, :, :2] == 0)
    assert torch.equal(bg[:, :, 2:], img[:, :, 2:])
    with pytest.raises(ValidationError):
        make_background(img, torch.zeros(1, 3, 3))


def test_rescale_mask():
    m = torch.ones(1, 4, 4)
    assert torch.equal(rescale_mask(m, 1), m)
    assert torch.equal(rescale_mask(m, 2), torch.ones(1, 2, 2))
    checker = ((torch.arange(4)[:, None] + torch.arange(4)[None]) % 2).float()[None]
    out = rescale_mask(checker, 2)
    assert torch.equal(out, checker[:, ::2, ::2])
    assert torch.all((out == 0) | (out == 1))
    with pytest.raises(ValidationError):
        rescale_mask(torch.ones(1, 5, 5), 2)
