"""Area-of-interest masks, background images and latent-resolution masks.

The segmenter is a deterministic stand-in for a promptable foundation model:
Otsu (or fixed) threshold on luminance, morphological closing, largest
connected component, with a centered-disk fallback when nothing plausible
is found.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage
from skimage.filters import threshold_otsu

from .errors import ValidationError

_LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class SegmenterParams:
    threshold_mode: str = "otsu"
    fixed_threshold: float = 0.5
    min_region_fraction: float = 0.02
    morphological_radius: int = 1

    def __post_init__(self) -> None:
        if self.threshold_mode not in ("otsu", "fixed"):
            raise ValidationError(f"threshold_mode must be 'otsu' or 'fixed', got {self.threshold_mode!r}")
        if not 0.0 < self.fixed_threshold < 1.0:
            raise ValidationError("fixed_threshold must lie in (0, 1)")
        if not 0.0 < self.min_region_fraction < 0.9:
            raise ValidationError("min_region_fraction must lie in (0, 0.9)")
        if self.morphological_radius < 0:
            raise ValidationError("morphological_radius must be >= 0")

    @classmethod
    def from_config(cls, cfg) -> SegmenterParams:
        return cls(
            threshold_mode=cfg.seg_threshold_mode,
            fixed_threshold=cfg.seg_fixed_threshold,
            min_region_fraction=cfg.seg_min_region_fraction,
            morphological_radius=cfg.seg_morph_radius,
        )


def _grayscale(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().cpu().double().numpy()
    if arr.shape[0] == 3:
        return np.tensordot(np.asarray(_LUMA), arr, axes=1)
    return arr.mean(axis=0)


def _disk(h: int, w: int, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[:h, :w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


def fallback_mask(h: int, w: int) -> torch.Tensor:
    """Centered disk covering a quarter of the image area."""
    radius = np.sqrt(0.25 * h * w / np.pi)
    return torch.from_numpy(_disk(h, w, radius).astype(np.float32))[None]


def segment(image: torch.Tensor, params: SegmenterParams | None = None) -> torch.Tensor:
    """Return a binary 1 x H x W mask of the dark foreground region."""
    params = params or SegmenterParams()
    if image.ndim != 3:
        raise ValidationError(f"expected C x H x W image, got shape {tuple(image.shape)}")
    gray = _grayscale(image)
    h, w = gray.shape
    if np.ptp(gray) < 1e-6:
        return fallback_mask(h, w)

    thresh = threshold_otsu(gray) if params.threshold_mode == "otsu" else params.fixed_threshold
    fg = gray <= thresh
    r = params.morphological_radius
    if r > 0:
        structure = _disk(2 * r + 1, 2 * r + 1, r)
        # pad so closing does not erode regions touching the border
        fg = ndimage.binary_closing(np.pad(fg, r), structure=structure)[r:-r, r:-r]

    labels, n = ndimage.label(fg)
    if n == 0:
        return fallback_mask(h, w)
    sizes = ndimage.sum_labels(fg, labels, index=np.arange(1, n + 1))
    largest = labels == (int(np.argmax(sizes)) + 1)
    frac = largest.mean()
    # a "foreground" that fills most of the frame means the threshold split the skin, not a lesion
    if frac < params.min_region_fraction or frac > 0.9:
        return fallback_mask(h, w)
    return torch.from_numpy(largest.astype(np.float32))[None]


def make_background(image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Zero the masked region: ``image * (1 - mask)`` per channel."""
    if image.shape[-2:] != mask.shape[-2:] or mask.shape[-3] != 1:
        raise ValidationError(
            f"mask shape {tuple(mask.shape)} does not match image shape {tuple(image.shape)}"
        )
    return image * (1.0 - mask)


def rescale_mask(mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Nearest-neighbour downsample (top-left pixel of each block).

    Works on 1 x H x W or B x 1 x H x W tensors.
    """
    if factor < 1:
        raise ValidationError("factor must be >= 1")
    h, w = mask.shape[-2:]
    if h % factor or w % factor:
        raise ValidationError(f"mask size {h}x{w} not divisible by {factor}")
    return mask[..., ::factor, ::factor].clone()
