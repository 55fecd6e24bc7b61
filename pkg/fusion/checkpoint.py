"""Parameter archive: named tensors in an .npz plus a JSON manifest."""

import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from numeric.errors import ConfigError, NotFoundError
from numeric.tensor import Tensor

logger = logging.getLogger("gestalt.fusion")

FORMAT_VERSION = 1
_MANIFEST_KEY = "__manifest__"


def save_checkpoint(path, params: dict, manifest: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {**manifest, "format_version": FORMAT_VERSION, "tensors": sorted(params)}
    arrays = {name: t.data for name, t in params.items()}
    with path.open("wb") as fh:
        np.savez(fh, **arrays, **{_MANIFEST_KEY: np.array(json.dumps(manifest, sort_keys=True))})
    logger.info(f"checkpoint written to {path} ({len(params)} tensors)")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"checkpoint {path} not found")
    with np.load(path, allow_pickle=False) as archive:
        if _MANIFEST_KEY not in archive:
            raise ConfigError(f"{path} has no manifest")
        return json.loads(str(archive[_MANIFEST_KEY]))


def load_checkpoint(path, expected_hash: Optional[str] = None) -> tuple[dict, dict]:
    """Returns (params, manifest); a version or config-hash mismatch is a ConfigError."""
    manifest = read_manifest(path)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"checkpoint format {manifest.get('format_version')} != {FORMAT_VERSION}")
    if expected_hash is not None and manifest.get("config_hash") != expected_hash:
        raise ConfigError(f"checkpoint config hash {manifest.get('config_hash')} does not match "
                          f"the current configuration {expected_hash}")
    with np.load(Path(path), allow_pickle=False) as archive:
        params = {name: Tensor(archive[name], requires_grad=True, name=name) for name in manifest["tensors"]}
    return params, manifest
