"""
f2f_pipeline.py

End-to-end FS -> FFPE translation of patches, tiled composites and whole manifests.

Main features:
- ModelBundle / load_models: the trained VAE + denoiser, schedule, extractor and
  translator, checked for compatible embedding and latent dimensions.
- translate_patch: extract -> encode -> invert under (FS, e_fs) -> blend the translated
  embedding -> denoise under (FFPE, e_hat) -> decode, with stage-tagged NaN checks.
- translate_tiled: independent tiles with seeds derived from (seed, row, col), reassembled
  in tile order regardless of processing order.
- translate_manifest: translate every FS patch of a manifest, writing PNGs, a manifest
  of translated patches and one JSON record per patch.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from app.config import GuidanceConfig
from app.embed_translate import FeatureExtractor, TranslatorPair, extract, load_extractor, load_translator, translate_embedding
from app.errors import NumericalFault, RejectedInputError
from app.ldm_core import (
    VAE, ConditionBundle, Denoiser, DomainToken, ImagePatch, decode, encode, load_ldm_checkpoint, tensor_to_pixels,
)
from app.manifest import load_image, save_image, write_manifest
from app.scheduler import NoiseSchedule, ddim_invert, denoise, make_schedule
from app.synth_data import derive_seed, reassemble, tile

logger = logging.getLogger(__name__)


@dataclass
class ModelBundle:
    vae: VAE
    denoiser: Denoiser
    schedule: NoiseSchedule
    extractor: Optional[FeatureExtractor] = None
    translator: Optional[TranslatorPair] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.vae.latent_channels != self.denoiser.config["latent_channels"]:
            raise RejectedInputError(
                f"VAE latent channels {self.vae.latent_channels} do not match the denoiser's "
                f"{self.denoiser.config['latent_channels']}"
            )
        if self.extractor is not None and self.extractor.dim != self.denoiser.embed_dim:
            raise RejectedInputError(
                f"Extractor dimension {self.extractor.dim} does not match the denoiser embedding {self.denoiser.embed_dim}"
            )
        if self.translator is not None and self.extractor is not None and self.translator.dim != self.extractor.dim:
            raise RejectedInputError(
                f"Translator dimension {self.translator.dim} does not match the extractor {self.extractor.dim}"
            )
        for module in (self.vae, self.denoiser, self.extractor, self.translator):
            if module is not None:
                module.eval()

    @property
    def G(self):
        return self.translator.G if self.translator is not None else None


def load_models(
    ldm_path: Union[str, Path],
    extractor_path: Optional[Union[str, Path]] = None,
    translator_path: Optional[Union[str, Path]] = None,
    device: str = "cpu",
) -> ModelBundle:
    vae, denoiser, meta = load_ldm_checkpoint(ldm_path, device)
    schedule = make_schedule(meta["T_train"], meta["beta_start"], meta["beta_end"])
    extractor = load_extractor(extractor_path, device) if extractor_path else None
    translator = load_translator(translator_path, device) if translator_path else None
    paths = {"ldm": str(ldm_path), "extractor": str(extractor_path or ""), "translator": str(translator_path or "")}
    return ModelBundle(vae, denoiser, schedule, extractor, translator, {**meta, "checkpoints": paths})


@dataclass
class TranslationJob:
    input: ImagePatch
    cfg: GuidanceConfig
    alpha: float
    models: ModelBundle
    seed: int = 0
    use_embedding: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise RejectedInputError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.use_embedding and self.models.extractor is None:
            raise RejectedInputError("Embedding conditioning requires an extractor")


def _check_finite(stage: str, patch_id: str, tensor: Optional[torch.Tensor]):
    if tensor is not None and not torch.isfinite(tensor).all():
        raise NumericalFault(f"Non-finite values at stage {stage} for patch {patch_id}", stage=stage)


def _norm(tensor: Optional[torch.Tensor]) -> Optional[float]:
    return None if tensor is None else float(tensor.float().norm().item())


@torch.no_grad()
def run_job(job: TranslationJob) -> Tuple[np.ndarray, dict]:
    """
    Translate one patch; returns H×W×3 pixels and the per-patch record.

    Raises:
        NumericalFault: If any intermediate turns non-finite (``stage`` names where).
    """
    m = job.models
    pid = job.input.patch_id
    started = time.perf_counter()

    x = job.input.tensor.unsqueeze(0)
    e_fs = extract(x, m.extractor) if job.use_embedding else None
    _check_finite("extract", pid, e_fs)

    z0 = encode(x, m.vae)
    _check_finite("encode", pid, z0.values)

    z_s, visited = ddim_invert(m.denoiser, z0, ConditionBundle(DomainToken.FS, e_fs), job.cfg, m.schedule)
    _check_finite("invert", pid, z_s.values)

    e_hat = translate_embedding(e_fs, m.G, job.alpha) if e_fs is not None else None
    _check_finite("translate", pid, e_hat)

    z_hat = denoise(
        m.denoiser, z_s, ConditionBundle(DomainToken.FFPE, e_hat), job.cfg, m.schedule, visited=visited
    )
    out = decode(z_hat, m.vae)
    _check_finite("decode", pid, out)

    record = {
        "patch_id": pid,
        "case_id": job.input.case_id,
        "seed": job.seed,
        "alpha": job.alpha,
        "use_embedding": job.use_embedding,
        "guidance": asdict(job.cfg),
        "n_steps": len(visited) - 1,
        "t_start": z_s.timestep,
        "norm_z0": _norm(z0.values),
        "norm_zS": _norm(z_s.values),
        "norm_e_fs": _norm(e_fs),
        "norm_e_hat": _norm(e_hat),
        "seconds": round(time.perf_counter() - started, 4),
    }
    logger.debug(
        "stage=translate patch=%s steps=%d z0=%.4f zS=%.4f e_hat=%s",
        pid, record["n_steps"], record["norm_z0"], record["norm_zS"], record["norm_e_hat"],
    )
    return tensor_to_pixels(out[0]), record


def translate_patch(job: TranslationJob) -> ImagePatch:
    pixels, _ = run_job(job)
    p = job.input
    return ImagePatch(pixels, "translated", p.class_label, p.case_id, p.patch_id)


def translate_tile(job_template: TranslationJob, row: int, col: int, pixels: np.ndarray) -> np.ndarray:
    src = job_template.input
    patch = ImagePatch(pixels, src.domain, src.class_label, src.case_id, f"{src.patch_id}_r{row}c{col}")
    job = replace(job_template, input=patch, seed=derive_seed(job_template.seed, row, col))
    return run_job(job)[0]


def translate_tiled(
    large_image: np.ndarray,
    tile_size: int,
    job_template: TranslationJob,
    order: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> np.ndarray:
    """
    Translate a large image tile by tile and reassemble it.

    Args:
        large_image (np.ndarray): H×W×3 pixels; H and W divisible by ``tile_size``.
        tile_size (int): Tile edge in pixels.
        job_template (TranslationJob): Settings shared by every tile; its ``input`` supplies
            the provenance and its ``seed`` the base of the per-tile seeds.
        order (sequence of int, optional): Processing order of the row-major tile indices.
        workers (int): Tiles translated concurrently.

    Raises:
        RejectedInputError: If the image size is not divisible by ``tile_size``.
    """
    tiles = tile(large_image, tile_size)
    order = list(order) if order is not None else list(range(len(tiles)))
    if sorted(order) != list(range(len(tiles))):
        raise RejectedInputError(f"Tile order must be a permutation of 0..{len(tiles) - 1}")

    def work(i):
        r, c, pixels = tiles[i]
        return i, (r, c, translate_tile(job_template, r, c, pixels))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = dict(pool.map(work, order))
    else:
        done = dict(work(i) for i in order)
    logger.info("stage=tiled tiles=%d tile_size=%d", len(tiles), tile_size)
    return reassemble([done[i] for i in range(len(tiles))], large_image.shape)


def translate_manifest(
    models: ModelBundle,
    manifest: pd.DataFrame,
    cfg: GuidanceConfig,
    alpha: float,
    out_dir: Union[str, Path],
    seed: int = 0,
    root: Union[str, Path] = ".",
    use_embedding: bool = True,
    tile_size: Optional[int] = None,
) -> pd.DataFrame:
    """
    Translate every FS row of ``manifest``.

    Writes ``<out_dir>/<split>/translated/<case_id>/<patch_id>.png``, ``manifest.jsonl`` and
    ``records.jsonl`` (one JSON record per patch). With ``tile_size`` the inputs are
    translated tile by tile.

    Returns:
        pd.DataFrame: The manifest of translated patches.
    """
    out_dir, root = Path(out_dir), Path(root)
    fs_rows = manifest[manifest["domain"] == "FS"].sort_values(["case_id", "patch_id"])
    if fs_rows.empty:
        raise RejectedInputError("Manifest holds no FS patches to translate")
    rows, records = [], []
    for rel_path, label, case_id, split, patch_id in zip(
        fs_rows["path"], fs_rows["class"], fs_rows["case_id"], fs_rows["split"], fs_rows["patch_id"]
    ):
        patch = ImagePatch(load_image(root / rel_path), "FS", label, case_id, patch_id)
        patch_seed = derive_seed(seed, case_id, patch_id)
        job = TranslationJob(patch, cfg, alpha, models, patch_seed, use_embedding)
        if tile_size:
            pixels = translate_tiled(patch.pixels, tile_size, job)
            record = {"patch_id": patch_id, "case_id": case_id, "seed": patch_seed, "tile_size": tile_size}
        else:
            pixels, record = run_job(job)
        rel = Path(split) / "translated" / case_id / f"{patch_id}.png"
        save_image(out_dir / rel, pixels)
        rows.append({
            "case_id": case_id, "class": label, "domain": "translated", "split": split,
            "path": rel.as_posix(), "seed": patch_seed, "patch_id": patch_id,
        })
        records.append({**record, "source": str(rel_path), "output": rel.as_posix()})

    translated = pd.DataFrame(rows)
    write_manifest(translated, out_dir / "manifest.jsonl")
    pd.DataFrame(records).to_json(
        out_dir / "records.jsonl", orient="records", lines=True
    )
    logger.info("stage=translate_manifest patches=%d out=%s alpha=%.3f S=%.2f GS=%.2f", len(rows), out_dir, alpha, cfg.S, cfg.GS)
    return translated
