"""File formats: PNG rasters, JSONL manifests, content hashes."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
import torch
from PIL import Image

from .errors import LoadError, ValidationError


def read_image(path: str | Path) -> torch.Tensor:
    """Read an 8-bit PNG as a float tensor C x H x W in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(arr.astype(np.float32) / 255.0)


def write_image(path: str | Path, image: torch.Tensor) -> None:
    arr = image.detach().cpu().clamp(0, 1).mul(255).round().to(torch.uint8).numpy()
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def read_mask(path: str | Path) -> torch.Tensor:
    """Read a mask PNG; on disk values must be exactly {0, 255}."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise LoadError(f"cannot read mask {path}: {exc}") from exc
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        raise ValidationError(f"mask {path} is not binary: found values {np.unique(arr[bad])[:5].tolist()}")
    return torch.from_numpy((arr == 255).astype(np.float32))[None]


def write_mask(path: str | Path, mask: torch.Tensor) -> None:
    arr = (mask.detach().cpu()[0].numpy() > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"file not found: {path}")
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: bad record: {exc}") from exc
    return records


def write_jsonl(path: str | Path, records: Iterable[Mapping[str, Any]]) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def hash_tensors(tensors: Mapping[str, torch.Tensor] | Iterable[torch.Tensor]) -> str:
    """Content hash of tensors (dtype, shape and raw bytes), order-sensitive."""
    h = hashlib.sha256()
    items = tensors.items() if isinstance(tensors, Mapping) else enumerate(tensors)
    for key, t in items:
        t = t.detach().cpu().contiguous()
        h.update(str(key).encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def hash_json(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()
