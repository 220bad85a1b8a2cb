"""Versioned checkpoint files: one ``.npz`` holding arrays plus a JSON manifest."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_VERSION = 1
_MANIFEST_KEY = "__manifest__"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> Path:
    """Write atomically: temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": FORMAT_VERSION,
        "arrays": {k: {"shape": list(np.shape(v)), "dtype": str(np.asarray(v).dtype)}
                   for k, v in arrays.items()},
        "meta": meta,
    }
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload[_MANIFEST_KEY] = np.array(json.dumps(manifest, sort_keys=True))
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        data = np.load(path, allow_pickle=False)
    except (ValueError, OSError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint archive ({exc})") from None
    with data:
        if _MANIFEST_KEY not in data:
            raise CheckpointError(f"{path}: missing manifest")
        manifest = json.loads(str(data[_MANIFEST_KEY]))
        if manifest.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {manifest.get('version')}")
        arrays = {k: data[k].copy() for k in manifest["arrays"]}
    for k, info in manifest["arrays"].items():
        if list(arrays[k].shape) != info["shape"]:
            raise CheckpointError(f"{path}: array {k} has shape {arrays[k].shape}, manifest {info['shape']}")
    return arrays, manifest["meta"]
