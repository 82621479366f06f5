"""
checkpoint.py

Checkpoint archives: one ``torch.save`` file holding module state dicts, extra tensors
and a metadata record, plus a sidecar ``<name>.json`` carrying the same metadata for
inspection without torch.

Functions:
    git_describe(): Best-effort ``git describe`` string of the working tree.
    save_checkpoint(path, state, metadata): Write archive and sidecar.
    load_checkpoint(path, map_location="cpu"): Read archive, return (state, metadata).
"""

import json
import logging
import subprocess
from pathlib import Path
from typing import Tuple, Union

import torch

from app.errors import RejectedInputError

logger = logging.getLogger(__name__)


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5, check=True,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def sidecar_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(path: Union[str, Path], state: dict, metadata: dict) -> Path:
    """
    Save a checkpoint archive and its JSON sidecar.

    Args:
        path: Archive path (conventionally ``*.pt``).
        state (dict): Name -> state dict or tensor.
        metadata (dict): JSON-serialisable record; ``git_describe`` is added when absent.

    Returns:
        Path: The archive path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = dict(metadata)
    metadata.setdefault("git_describe", git_describe())
    torch.save({"state": state, "metadata": metadata}, path)
    with open(sidecar_path(path), "w") as f:
        json.dump(metadata, f, indent=2, sort_keys=True, default=str)
    logger.info("checkpoint saved path=%s keys=%s", path, sorted(state))
    return path


def load_checkpoint(path: Union[str, Path], map_location="cpu") -> Tuple[dict, dict]:
    """
    Load a checkpoint archive written by ``save_checkpoint``.

    Raises:
        RejectedInputError: If the file does not exist or is not a checkpoint archive.
    """
    path = Path(path)
    if not path.is_file():
        raise RejectedInputError(f"Checkpoint not found: {path}")
    archive = torch.load(path, map_location=map_location, weights_only=False)
    if not isinstance(archive, dict) or "state" not in archive or "metadata" not in archive:
        raise RejectedInputError(f"Not a checkpoint archive: {path}")
    return archive["state"], archive["metadata"]
