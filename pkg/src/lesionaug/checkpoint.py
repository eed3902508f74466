"""Versioned checkpoint container shared by every trained artifact."""

from __future__ import annotations

from pathlib import Path
from typing import Any

import torch

from .errors import LoadError

FORMAT_VERSION = 1


def save_container(path: str | Path, kind: str, payload: dict[str, Any]) -> None:
    torch.save({"format_version": FORMAT_VERSION, "kind": kind, "payload": payload}, path)


def load_container(path: str | Path, kind: str) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or "format_version" not in blob:
        raise LoadError(f"{path} is not a checkpoint container")
    if blob["format_version"] != FORMAT_VERSION:
        raise LoadError(f"{path}: format version {blob['format_version']}, expected {FORMAT_VERSION}")
    if blob.get("kind") != kind:
        raise LoadError(f"{path}: holds a {blob.get('kind')!r} checkpoint, expected {kind!r}")
    return blob["payload"]
