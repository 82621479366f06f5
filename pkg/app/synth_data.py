"""
synth_data.py

Procedural two-domain corpus: case-structured, class-labelled "tissue" textures rendered
clean (FFPE-like) and corrupted by folds, ice-crystal holes, a colour cast and blur
(FS-like).

Main features:
- Three classes with distinct nucleus statistics: A (many small round nuclei),
  B (sparse large nuclei), C (elongated nuclei sharing a per-case orientation).
- Per-case parameters jitter around the class prototype, so patches of one case share
  texture statistics while cases of one class differ.
- FS and FFPE renders of a case are independent texture draws, never pixel-aligned.
- Case-level stratified splits, per-case derived seeds, PNG files and a JSON-lines manifest.
- Large composites for slide-level tiling, plus tile / reassemble helpers.
"""

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import ndimage

from app.config import ArtifactConfig
from app.errors import RejectedInputError
from app.ldm_core import CLASS_LABELS
from app.manifest import save_image, write_manifest

logger = logging.getLogger(__name__)

BACKGROUND = np.array([0.94, 0.80, 0.87])
NUCLEUS = np.array([0.42, 0.22, 0.58])
REFERENCE_AREA = 64 * 64

# nuclei per 64x64 area, radius range (px), axis ratio
CLASS_PROTOTYPES = {
    "A": {"density": 55.0, "radius": (1.3, 2.1), "aspect": 1.0},
    "B": {"density": 9.0, "radius": (3.8, 5.5), "aspect": 1.0},
    "C": {"density": 22.0, "radius": (3.6, 4.6), "aspect": 0.3},
}


def derive_seed(*parts) -> int:
    """Stable 31-bit seed from any sequence of printable parts."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


@dataclass
class CaseSpec:
    case_id: str
    class_label: str
    texture_seed: int
    n_patches: int
    split: str = "train"

    def __post_init__(self):
        if self.class_label not in CLASS_LABELS:
            raise RejectedInputError(f"Unknown class label {self.class_label!r}")

    def case_params(self) -> Dict[str, float]:
        """Per-case jitter around the class prototype, fixed by ``texture_seed``."""
        rng = np.random.default_rng(self.texture_seed)
        return {
            "density_scale": float(rng.uniform(0.85, 1.15)),
            "radius_scale": float(rng.uniform(0.92, 1.08)),
            "angle": float(rng.uniform(0.0, math.pi)),
            "stain_shift": float(rng.uniform(-0.04, 0.04)),
        }


def _ellipse_mask(shape, cy, cx, a, b, theta) -> Tuple[Tuple[slice, slice], np.ndarray]:
    r = int(math.ceil(max(a, b))) + 1
    y0, y1 = max(0, int(cy) - r), min(shape[0], int(cy) + r + 1)
    x0, x1 = max(0, int(cx) - r), min(shape[1], int(cx) + r + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (slice(y0, y1), slice(x0, x1)), (u / a) ** 2 + (v / b) ** 2 <= 1.0


def render_texture(
    class_label: str, size: int, case_params: Optional[Dict[str, float]], rng: np.random.Generator
) -> np.ndarray:
    """
    Render a clean H&E-like texture.

    Args:
        class_label (str): One of CLASS_LABELS.
        size (int): Output height and width.
        case_params (dict, optional): Output of ``CaseSpec.case_params``; prototype values when None.
        rng (np.random.Generator): Source of nucleus placement and stain noise.

    Returns:
        np.ndarray: ``size×size×3`` float64 image in [0, 1].
    """
    if class_label not in CLASS_PROTOTYPES:
        raise RejectedInputError(f"Unknown class label {class_label!r}")
    proto = CLASS_PROTOTYPES[class_label]
    params = case_params or {"density_scale": 1.0, "radius_scale": 1.0, "angle": 0.0, "stain_shift": 0.0}

    nuclei = np.zeros((size, size))
    expected = proto["density"] * params["density_scale"] * size * size / REFERENCE_AREA
    for _ in range(int(rng.poisson(expected))):
        cy, cx = rng.uniform(0, size, 2)
        a = rng.uniform(*proto["radius"]) * params["radius_scale"]
        b = a * proto["aspect"]
        if proto["aspect"] < 1.0:
            theta = params["angle"] + rng.normal(0.0, 0.15)
        else:
            theta = rng.uniform(0.0, math.pi)
        window, mask = _ellipse_mask(nuclei.shape, cy, cx, a, max(b, 0.8), theta)
        nuclei[window] = np.maximum(nuclei[window], mask * rng.uniform(0.75, 1.0))
    nuclei = ndimage.gaussian_filter(nuclei, sigma=0.6)

    stain = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), sigma=4.0)
    stain = 0.6 * stain / (np.abs(stain).max() + 1e-8)
    background = BACKGROUND + params["stain_shift"] + 0.04 * stain[..., None]
    image = background * (1.0 - nuclei[..., None]) + NUCLEUS * nuclei[..., None]
    image += rng.normal(0.0, 0.01, image.shape)
    return np.clip(image, 0.0, 1.0)


def _artifact_count(rate: float, shape) -> int:
    if rate <= 0:
        return 0
    return int(math.ceil(rate * shape[0] * shape[1] / REFERENCE_AREA))


def _fold_mask(shape, width: float, rng: np.random.Generator) -> np.ndarray:
    """Quadratic Bezier streak across the image, ``width`` pixels wide."""
    h, w = shape
    p0, p1, p2 = (rng.uniform([0, 0], [h, w]) for _ in range(3))
    s = np.linspace(0.0, 1.0, 4 * (h + w))[:, None]
    curve = (1 - s) ** 2 * p0 + 2 * (1 - s) * s * p1 + s ** 2 * p2
    hit = np.zeros(shape, dtype=bool)
    rows = np.clip(np.rint(curve[:, 0]).astype(int), 0, h - 1)
    cols = np.clip(np.rint(curve[:, 1]).astype(int), 0, w - 1)
    hit[rows, cols] = True
    radius = max(width / 2.0, 0.5)
    return ndimage.distance_transform_edt(~hit) <= radius


def apply_fs_artifacts(clean_image: np.ndarray, cfg: ArtifactConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Corrupt a clean texture with FS-like artifacts.

    Folds darken curved streaks by half, ice-crystal holes paint white ellipses, then the
    per-channel colour shift is added and the result is Gaussian-blurred. An all-zero
    config returns the input unchanged.

    Returns:
        np.ndarray: Corrupted image, clamped to [0, 1].
    """
    image = np.asarray(clean_image, dtype=np.float64).copy()
    shape = image.shape[:2]

    for _ in range(_artifact_count(cfg.fold_density, shape)):
        mask = _fold_mask(shape, cfg.streak_width, rng)
        image[mask] *= 0.5

    r_lo, r_hi = cfg.hole_radius
    for _ in range(_artifact_count(cfg.ice_hole_rate, shape)):
        cy, cx = rng.uniform(0, shape[0]), rng.uniform(0, shape[1])
        a, b = rng.uniform(r_lo, r_hi, 2)
        window, mask = _ellipse_mask(shape, cy, cx, max(a, 1.0), max(b, 1.0), rng.uniform(0, math.pi))
        region = image[window]
        region[mask] = 1.0

    shift = np.asarray(cfg.color_shift, dtype=np.float64)
    if np.any(shift != 0):
        image = image + shift
    if cfg.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, sigma=(cfg.blur_sigma, cfg.blur_sigma, 0))
    return np.clip(image, 0.0, 1.0)


def assign_splits(n_cases: int, split_ratios: Sequence[float], seed: int) -> List[CaseSpec]:
    """
    Build case specs with class-balanced labels and a case-level split stratified by class.

    Raises:
        RejectedInputError: If ``n_cases`` is not divisible by 3 or the ratios do not sum to 1.
    """
    if n_cases <= 0 or n_cases % len(CLASS_LABELS):
        raise RejectedInputError(f"n_cases must be a positive multiple of {len(CLASS_LABELS)}, got {n_cases}")
    if len(split_ratios) != 3 or abs(sum(split_ratios) - 1.0) > 1e-6:
        raise RejectedInputError(f"split_ratios must be three values summing to 1, got {list(split_ratios)}")
    per_class = n_cases // len(CLASS_LABELS)
    n_train = int(round(split_ratios[0] * per_class))
    n_val = int(round(split_ratios[1] * per_class))
    rng = np.random.default_rng(derive_seed(seed, "splits"))

    specs = []
    for k, label in enumerate(CLASS_LABELS):
        order = rng.permutation(per_class)
        for j in range(per_class):
            idx = k + j * len(CLASS_LABELS)
            rank = int(order[j])
            split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            specs.append(CaseSpec(f"case_{idx:03d}", label, derive_seed(seed, "case", idx), 0, split))
    return sorted(specs, key=lambda s: s.case_id)


def _render_case(spec: CaseSpec, root: Path, image_size: int, artifacts: ArtifactConfig) -> List[dict]:
    params = spec.case_params()
    records = []
    for domain in ("FFPE", "FS"):
        for i in range(spec.n_patches):
            seed = derive_seed(spec.texture_seed, domain, i)
            rng = np.random.default_rng(seed)
            image = render_texture(spec.class_label, image_size, params, rng)
            if domain == "FS":
                image = apply_fs_artifacts(image, artifacts, rng)
            patch_id = f"p{i:03d}"
            rel = Path(spec.split) / domain / spec.case_id / f"{patch_id}.png"
            save_image(root / rel, image)
            records.append({
                "case_id": spec.case_id, "class": spec.class_label, "domain": domain,
                "split": spec.split, "path": rel.as_posix(), "seed": seed, "patch_id": patch_id,
            })
    return records


def generate_dataset(
    root: Union[str, Path],
    n_cases: int,
    patches_per_case: int,
    split_ratios: Sequence[float] = (0.7, 0.15, 0.15),
    seed: int = 0,
    image_size: int = 64,
    artifacts: Optional[ArtifactConfig] = None,
    workers: int = 1,
) -> pd.DataFrame:
    """
    Render the two-domain corpus under ``root`` and write ``root/manifest.jsonl``.

    Returns:
        pd.DataFrame: The manifest, ``n_cases × patches_per_case × 2`` rows.
    """
    if patches_per_case < 1:
        raise RejectedInputError(f"patches_per_case must be positive, got {patches_per_case}")
    artifacts = artifacts or ArtifactConfig()
    root = Path(root)
    specs = assign_splits(n_cases, split_ratios, seed)
    for spec in specs:
        spec.n_patches = patches_per_case

    def run(spec):
        return _render_case(spec, root, image_size, artifacts)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_case = list(pool.map(run, specs))
    else:
        per_case = [run(spec) for spec in specs]

    manifest = pd.DataFrame([r for records in per_case for r in records])
    write_manifest(manifest, root / "manifest.jsonl")
    counts = manifest[manifest["domain"] == "FFPE"].groupby("class")["case_id"].nunique().to_dict()
    logger.info("stage=synth root=%s cases=%d images=%d classes=%s", root, n_cases, len(manifest), counts)
    return manifest


def render_composite(
    spec: CaseSpec, size: int, artifacts: Optional[ArtifactConfig], rng: np.random.Generator
) -> np.ndarray:
    """Large texture of one case; FS-corrupted when ``artifacts`` is given, clean otherwise."""
    image = render_texture(spec.class_label, size, spec.case_params(), rng)
    if artifacts is not None:
        image = apply_fs_artifacts(image, artifacts, rng)
    return image


def generate_composites(
    root: Union[str, Path], manifest: pd.DataFrame, size: int, artifacts: ArtifactConfig, seed: int = 0
) -> pd.DataFrame:
    """One FS and one FFPE composite per test case under ``root/composite``; manifest ``composites.jsonl``."""
    root = Path(root)
    cases = manifest[manifest["split"] == "test"].drop_duplicates("case_id")
    records = []
    for case_id, label in zip(cases["case_id"], cases["class"]):
        spec = CaseSpec(case_id, label, derive_seed(seed, "case", int(case_id.split("_")[-1])), 1, "composite")
        for domain in ("FFPE", "FS"):
            comp_seed = derive_seed(spec.texture_seed, "composite", domain)
            image = render_composite(
                spec, size, artifacts if domain == "FS" else None, np.random.default_rng(comp_seed)
            )
            rel = Path("composite") / domain / case_id / "c000.png"
            save_image(root / rel, image)
            records.append({
                "case_id": case_id, "class": label, "domain": domain, "split": "composite",
                "path": rel.as_posix(), "seed": comp_seed, "patch_id": "c000",
            })
    df = pd.DataFrame(records)
    if len(df):
        write_manifest(df, root / "composites.jsonl")
    logger.info("stage=synth composites=%d size=%d", len(df), size)
    return df


def tile(image: np.ndarray, tile_size: int) -> List[Tuple[int, int, np.ndarray]]:
    """
    Split an H×W(×C) image into row-major ``(row, col, tile)`` triples.

    Raises:
        RejectedInputError: If H or W is not divisible by ``tile_size``.
    """
    h, w = image.shape[:2]
    if tile_size <= 0 or h % tile_size or w % tile_size:
        raise RejectedInputError(f"Image size {h}x{w} is not divisible by tile size {tile_size}")
    return [
        (r, c, image[r * tile_size:(r + 1) * tile_size, c * tile_size:(c + 1) * tile_size].copy())
        for r in range(h // tile_size)
        for c in range(w // tile_size)
    ]


def reassemble(tiles: Sequence[Tuple[int, int, np.ndarray]], shape: Sequence[int]) -> np.ndarray:
    """Inverse of ``tile``; tiles may come in any order."""
    if not tiles:
        raise RejectedInputError("No tiles to reassemble")
    th, tw = tiles[0][2].shape[:2]
    out = np.zeros(tuple(shape), dtype=tiles[0][2].dtype)
    for r, c, t in tiles:
        out[r * th:(r + 1) * th, c * tw:(c + 1) * tw] = t
    return out
