"""
manifest.py

Utilities to read, validate and write patch manifests and the PNG patches they point to.

A manifest is JSON-lines (or CSV), one record per patch, normalized into a pandas
DataFrame with the columns: case_id, class, domain, split, path, seed, patch_id.
``path`` is relative to the directory holding the manifest.

Functions:
    parse_manifest(file_input): Parse a manifest file (.jsonl, .json, .csv) or file-like object.
    write_manifest(df, path): Write a manifest as JSON-lines, sorted for byte-stable output.
    load_image(path): Read an 8-bit PNG into an H×W×3 float array in [0, 1].
    save_image(path, pixels): Quantize an H×W×3 float array to 8-bit and write it as PNG.
    load_patches(df, root): Load the manifest rows as ImagePatch objects.
    patches_to_tensor(patches): Stack patches into one channel-first batch.
"""

import io
import logging
from pathlib import Path
from typing import IO, List, Union

import numpy as np
import pandas as pd
import torch
from PIL import Image

from app.errors import RejectedInputError
from app.ldm_core import CLASS_LABELS, ImagePatch

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["case_id", "class", "domain", "split", "path", "seed", "patch_id"]
MANIFEST_DOMAINS = ("FS", "FFPE", "translated")
MANIFEST_SPLITS = ("train", "val", "test", "composite")


def parse_manifest(file_input: Union[str, Path, IO]) -> pd.DataFrame:
    """
    Parse a patch manifest and return a normalized DataFrame.

    Args:
        file_input (str, Path or IO): Path to a .jsonl/.json/.csv manifest, or a file-like
            object holding JSON-lines.

    Returns:
        pd.DataFrame: Columns MANIFEST_COLUMNS, ``case_id``/``patch_id`` as strings.

    Raises:
        RejectedInputError: On unsupported file types, missing columns or unknown
            class/domain/split values.
    """
    if isinstance(file_input, (str, Path)):
        path = Path(file_input)
        if path.suffix in (".jsonl", ".json"):
            df = pd.read_json(path, lines=True, dtype={"case_id": str, "patch_id": str})
        elif path.suffix == ".csv":
            df = pd.read_csv(path, dtype={"case_id": str, "patch_id": str})
        else:
            raise RejectedInputError(f"Unsupported file type: {path}")
    else:
        content = file_input.read()
        if isinstance(content, bytes):
            content = content.decode("utf-8")
        if not content.strip():
            return pd.DataFrame(columns=MANIFEST_COLUMNS)
        df = pd.read_json(io.StringIO(content), lines=True, dtype={"case_id": str, "patch_id": str})

    missing = [col for col in MANIFEST_COLUMNS if col not in df.columns]
    if missing:
        raise RejectedInputError(f"Missing expected columns: {missing}")
    df = df[MANIFEST_COLUMNS].copy()
    df["class"] = df["class"].astype(str)
    df["seed"] = df["seed"].astype(np.int64)

    for col, allowed in (("class", CLASS_LABELS), ("domain", MANIFEST_DOMAINS), ("split", MANIFEST_SPLITS)):
        bad = sorted(set(df[col]) - set(allowed))
        if bad:
            raise RejectedInputError(f"Unknown {col} values: {bad}")
    return df


def write_manifest(df: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Write ``df`` as JSON-lines, rows sorted by (split, domain, case_id, patch_id)."""
    missing = [col for col in MANIFEST_COLUMNS if col not in df.columns]
    if missing:
        raise RejectedInputError(f"Missing expected columns: {missing}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = df[MANIFEST_COLUMNS].sort_values(["split", "domain", "case_id", "patch_id"]).reset_index(drop=True)
    ordered.to_json(path, orient="records", lines=True)
    logger.debug("manifest written path=%s rows=%d", path, len(ordered))
    return path


def load_image(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as e:
        raise RejectedInputError(f"Cannot read image {path}: {e}") from e


def save_image(path: Union[str, Path], pixels: np.ndarray) -> Path:
    """Quantize to 8-bit (round half to even) and write a PNG; parent dirs are created."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(data, mode="RGB").save(path, format="PNG")
    except OSError as e:
        raise RejectedInputError(f"Cannot write image {path}: {e}") from e
    return path


def load_patches(df: pd.DataFrame, root: Union[str, Path]) -> List[ImagePatch]:
    root = Path(root)
    return [
        ImagePatch(
            pixels=load_image(root / rel_path),
            domain=domain,
            class_label=label,
            case_id=case_id,
            patch_id=patch_id,
        )
        for rel_path, domain, label, case_id, patch_id in zip(
            df["path"], df["domain"], df["class"], df["case_id"], df["patch_id"]
        )
    ]


def patches_to_tensor(patches: List[ImagePatch]) -> torch.Tensor:
    if not patches:
        raise RejectedInputError("No patches to stack")
    return torch.stack([p.tensor for p in patches])
