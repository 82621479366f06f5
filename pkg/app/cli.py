"""
cli.py

Command-line entry point: ``python -m app.cli <command> [--config run.yaml] [--key.path value ...]``.

Commands:
    synth             Render the synthetic two-domain corpus (``--composites`` adds large FS/FFPE composites).
    train-extractor   Build every extractor named in the config; pretrain the trainable ones on FFPE patches.
    train-ldm         Train the VAE and base denoiser, then fine-tune LoRA adapters (``--lora-only`` skips phase 1).
    train-translator  Train the FS -> FFPE embedding translator.
    translate         Translate the FS patches of the evaluation split (``--tiled`` also does the composites).
    eval              CaseFD per extractor, MIL cross-validation, results table and report.
    sweep             Re-run translate + eval over one axis (S, GS, alpha, lora_rank, prox, embedding).
    all               synth -> train-extractor -> train-ldm -> train-translator -> translate -> eval.

Every command writes ``resolved_config.yaml`` next to its outputs, skips work whose
outputs already exist unless ``--force`` is given, and reports failures as one JSON
object on stderr (exit status 2 for configuration errors, 1 otherwise).
"""

import argparse
import json
import logging
import random
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import torch  # noqa: E402
import yaml  # noqa: E402

from app.config import RunConfig, dump_config, load_config, replace_key  # noqa: E402
from app.embed_translate import (  # noqa: E402
    TranslatorPair, build_extractor, cycle_error, extract, load_extractor, pretrain_extractor,
    save_extractor, save_translator, train_translator,
)
from app.errors import ConfigError, F2FError, NumericalFault, RejectedInputError, TrainingFault  # noqa: E402
from app.eval_metrics import (  # noqa: E402
    CaseSet, dataset_case_fd, evaluate_classification, metric_records, train_mil, write_metric_records,
)
from app.f2f_pipeline import load_models, translate_manifest  # noqa: E402
from app.ldm_core import (  # noqa: E402
    CLASS_LABELS, VAE, Denoiser, DomainToken, encode, fine_tune_lora, load_ldm_checkpoint, make_generator,
    reset_parameters_, save_ldm_checkpoint, train_ldm, train_vae,
)
from app.manifest import load_patches, parse_manifest, patches_to_tensor  # noqa: E402
from app.report_gen import generate_markdown_report, save_report  # noqa: E402
from app.scheduler import make_schedule, roundtrip_error  # noqa: E402
from app.summary import build_table, save_table, summarize_metrics  # noqa: E402
from app.synth_data import generate_composites, generate_dataset  # noqa: E402

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"

SWEEP_AXES = {
    "S": "guidance.S",
    "GS": "guidance.GS",
    "alpha": "alpha",
    "lora_rank": "model.lora_rank",
    "prox": "guidance.prox_enabled",
    "embedding": "use_embedding",
}
# axes whose points need their own LoRA phase
RETRAIN_AXES = ("lora_rank", "embedding")


# ---------------------------------------------------------------------------------
# Setup helpers
# ---------------------------------------------------------------------------------


def parse_overrides(extra: Sequence[str]) -> List[Tuple[str, str]]:
    """
    Turn leftover ``--key.path value`` / ``--key.path=value`` arguments into override pairs.

    Raises:
        ConfigError: On a token that is not an override or an override without a value.
    """
    pairs, i = [], 0
    extra = list(extra)
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or len(token) == 2:
            raise ConfigError(f"unexpected argument {token!r}", token)
        key = token[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError("override is missing a value", key)
            raw = extra[i + 1]
            i += 2
        pairs.append((key, raw))
    return pairs


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def configure_logging(level: str):
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT, force=True)


def _done(paths: Sequence[Path], force: bool, what: str) -> bool:
    if not force and paths and all(Path(p).exists() for p in paths):
        logger.info("stage=%s skipped=true reason=outputs-exist (use --force to overwrite)", what)
        return True
    return False


def ldm_filename(cfg: RunConfig) -> str:
    return "ldm.pt" if cfg.use_embedding else "ldm_noemb.pt"


def base_filename(cfg: RunConfig) -> str:
    return "ldm_base.pt" if cfg.use_embedding else "ldm_base_noemb.pt"


def extractor_path(cfg: RunConfig, name: str) -> Path:
    return cfg.checkpoint_dir / f"extractor_{name}.pt"


def _manifest(cfg: RunConfig) -> pd.DataFrame:
    path = cfg.data_root / "manifest.jsonl"
    if not path.exists():
        raise RejectedInputError(f"Manifest not found: {path} (run synth first)")
    return parse_manifest(path)


def _select(df: pd.DataFrame, domain: Optional[str] = None, splits: Optional[Sequence[str]] = None) -> pd.DataFrame:
    out = df
    if domain is not None:
        out = out[out["domain"] == domain]
    if splits is not None:
        out = out[out["split"].isin(list(splits))]
    return out.sort_values(["case_id", "patch_id"]).reset_index(drop=True)


def _eval_splits(cfg: RunConfig) -> Optional[List[str]]:
    return None if cfg.eval.split == "all" else [cfg.eval.split]


def _images(cfg: RunConfig, df: pd.DataFrame, root: Optional[Path] = None):
    patches = load_patches(df, root or cfg.data_root)
    return patches, patches_to_tensor(patches)


def _labels(patches) -> torch.Tensor:
    return torch.tensor([CLASS_LABELS.index(p.class_label) for p in patches], dtype=torch.long)


def _tokens(patches) -> torch.Tensor:
    return torch.tensor([int(DomainToken.for_domain(p.domain)) for p in patches], dtype=torch.long)


# ---------------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, force: bool = False, composites: bool = False) -> pd.DataFrame:
    root = cfg.data_root
    outputs = [root / "manifest.jsonl"] + ([root / "composites.jsonl"] if composites else [])
    if _done(outputs, force, "synth"):
        return parse_manifest(root / "manifest.jsonl")
    manifest = generate_dataset(
        root, cfg.data.n_cases, cfg.data.patches_per_case, cfg.data.split_ratios, cfg.seed,
        cfg.data.image_size, cfg.artifacts, cfg.data.workers,
    )
    if composites:
        generate_composites(root, manifest, cfg.data.composite_size, cfg.artifacts, cfg.seed)
    dump_config(cfg, root / "resolved_config.yaml")
    return manifest


def cmd_train_extractor(cfg: RunConfig, force: bool = False) -> Dict[str, Path]:
    names = list(dict.fromkeys([cfg.extractor] + list(cfg.eval.extractors)))
    paths = {name: extractor_path(cfg, name) for name in names}
    if _done(list(paths.values()), force, "train-extractor"):
        return paths
    df = _select(_manifest(cfg), "FFPE", ["train"])
    patches, images = _images(cfg, df)
    labels = _labels(patches)
    for name in names:
        V = build_extractor(name, dim=cfg.model.embed_dim, seed=cfg.seed).to(cfg.device)
        meta = {"seed": cfg.seed}
        if V.trainable:
            history = pretrain_extractor(
                V, images, labels, cfg.train.extractor_steps, cfg.train.extractor_lr,
                cfg.train.extractor_batch_size, make_generator(cfg.seed), cfg.train.log_every,
            )
            meta["final_accuracy"] = float(history["accuracy"].tail(50).mean()) if len(history) else None
        save_extractor(paths[name], V, meta)
    dump_config(cfg, cfg.checkpoint_dir / "resolved_config.yaml")
    return paths


def _ldm_training_data(cfg: RunConfig, vae: VAE):
    df = _select(_manifest(cfg), splits=["train"])
    patches, images = _images(cfg, df)
    latents = torch.cat([encode(b, vae).values.cpu() for b in images.split(256)])
    embeddings = None
    if cfg.use_embedding:
        V = load_extractor(extractor_path(cfg, cfg.extractor), cfg.device)
        embeddings = extract(images, V)
    return latents, _tokens(patches), embeddings


def _roundtrip_bound(cfg: RunConfig, vae: VAE, model: Denoiser, schedule) -> float:
    df = _select(_manifest(cfg), "FS", ["val"])
    if df.empty:
        df = _select(_manifest(cfg), "FS", ["train"])
    df = df.head(cfg.train.roundtrip_samples)
    _, images = _images(cfg, df)
    latents = encode(images, vae).values
    embeddings = None
    if cfg.use_embedding:
        embeddings = extract(images, load_extractor(extractor_path(cfg, cfg.extractor), cfg.device))
    return roundtrip_error(model, latents, embeddings, schedule, 0.5, cfg.guidance.T_inference)


def cmd_train_ldm(
    cfg: RunConfig, force: bool = False, lora_only: bool = False, out_path: Optional[Path] = None
) -> Path:
    """
    Phase 1 trains the VAE and the full denoiser (``ldm_base.pt``, or ``ldm_base_noemb.pt``
    without embedding conditioning); phase 2 installs LoRA adapters of ``model.lora_rank``
    and trains adapters plus the token table.
    """
    out_path = Path(out_path or cfg.checkpoint_dir / ldm_filename(cfg))
    base_path = cfg.checkpoint_dir / base_filename(cfg)
    if _done([out_path], force, "train-ldm"):
        return out_path
    schedule = make_schedule(cfg.schedule.T_train, cfg.schedule.beta_start, cfg.schedule.beta_end)
    generator = make_generator(cfg.seed)
    opt_kwargs = {
        "lr": cfg.optim.lr, "betas": (cfg.optim.beta1, cfg.optim.beta2), "weight_decay": cfg.optim.weight_decay,
        "batch_size": cfg.optim.batch_size, "cfg_dropout": cfg.train.cfg_dropout, "log_every": cfg.train.log_every,
    }

    if lora_only or (base_path.exists() and not force):
        vae, model, base_meta = load_ldm_checkpoint(base_path, cfg.device)
        if bool(base_meta.get("use_embedding", True)) != cfg.use_embedding:
            raise RejectedInputError(
                f"Base checkpoint {base_path} was trained with use_embedding={base_meta.get('use_embedding', True)}"
            )
        vae_val_mse = base_meta.get("vae_val_mse")
        latents, tokens, embeddings = _ldm_training_data(cfg, vae)
    else:
        m = cfg.model
        vae = reset_parameters_(VAE(m.latent_channels, m.downsample, m.vae_channels), generator).to(cfg.device)
        df = _manifest(cfg)
        _, train_images = _images(cfg, _select(df, splits=["train"]))
        val_df = _select(df, splits=["val"])
        val_images = _images(cfg, val_df)[1] if len(val_df) else train_images[:64]
        vae_stats = train_vae(
            vae, train_images, val_images, cfg.train.vae_steps, cfg.train.vae_lr, cfg.train.kl_weight,
            cfg.train.vae_batch_size, generator, cfg.train.log_every,
        )
        vae_val_mse = vae_stats["val_mse"]
        model = Denoiser(
            m.latent_channels, m.base_channels, m.channel_mults, m.time_emb_dim, m.embed_dim, cfg.schedule.T_train
        )
        model = reset_parameters_(model, generator).to(cfg.device)
        latents, tokens, embeddings = _ldm_training_data(cfg, vae)
        history = train_ldm(
            model, latents, tokens, embeddings, schedule, cfg.train.base_steps,
            generator=generator, stage="ldm-base", **opt_kwargs,
        )
        save_ldm_checkpoint(base_path, vae, model, schedule, {
            "phase": "base", "seed": cfg.seed, "vae_val_mse": vae_val_mse,
            "final_loss": float(history["loss"].tail(100).mean()) if len(history) else None,
            "use_embedding": cfg.use_embedding,
        })

    history = fine_tune_lora(
        model, cfg.model.lora_rank, latents, tokens, embeddings, schedule, cfg.train.lora_steps,
        scale=cfg.model.lora_scale, generator=generator, **opt_kwargs,
    )
    bound = _roundtrip_bound(cfg, vae, model, schedule)
    save_ldm_checkpoint(out_path, vae, model, schedule, {
        "phase": "lora", "seed": cfg.seed, "vae_val_mse": vae_val_mse, "roundtrip_bound": bound,
        "final_loss": float(history["loss"].tail(100).mean()) if len(history) else None,
        "use_embedding": cfg.use_embedding, "extractor": cfg.extractor,
    })
    dump_config(cfg, out_path.parent / "resolved_config.yaml")
    logger.info("stage=train-ldm out=%s lora_rank=%d roundtrip=%.4f", out_path, cfg.model.lora_rank, bound)
    return out_path


def cmd_train_translator(cfg: RunConfig, force: bool = False) -> Path:
    out_path = cfg.checkpoint_dir / "translator.pt"
    if _done([out_path], force, "train-translator"):
        return out_path
    V = load_extractor(extractor_path(cfg, cfg.extractor), cfg.device)
    df = _manifest(cfg)
    emb_fs = extract(_images(cfg, _select(df, "FS", ["train"]))[1], V)
    emb_ffpe = extract(_images(cfg, _select(df, "FFPE", ["train"]))[1], V)
    t = cfg.translator
    pair = TranslatorPair(V.dim, identity_init=t.identity_init, generator=make_generator(cfg.seed)).to(cfg.device)
    history = train_translator(
        pair, emb_fs, emb_ffpe, t.steps, t.lambda_gp, t.lambda_cyc, t.n_critic, t.lr, (t.beta1, t.beta2),
        t.batch_size, make_generator(cfg.seed), cfg.train.log_every,
    )
    save_translator(out_path, pair, {
        "seed": cfg.seed, "extractor": cfg.extractor, "lambda_gp": t.lambda_gp, "lambda_cyc": t.lambda_cyc,
        "n_critic": t.n_critic, "steps": t.steps, "cycle_error": cycle_error(pair, emb_fs.to(cfg.device)),
        "final_generator_loss": float(history["generator"].iloc[-1]) if len(history) else None,
    })
    dump_config(cfg, cfg.checkpoint_dir / "resolved_config.yaml")
    return out_path


def translation_dir(cfg: RunConfig, name: str) -> Path:
    return cfg.output_root / "translations" / name


def cmd_translate(
    cfg: RunConfig, force: bool = False, name: str = "default", tiled: bool = False, ldm_path: Optional[Path] = None
) -> pd.DataFrame:
    out_dir = translation_dir(cfg, name)
    outputs = [out_dir / "manifest.jsonl"] + ([out_dir / "tiled" / "manifest.jsonl"] if tiled else [])
    if _done(outputs, force, "translate"):
        return parse_manifest(out_dir / "manifest.jsonl")
    models = load_models(
        ldm_path or cfg.checkpoint_dir / ldm_filename(cfg),
        extractor_path(cfg, cfg.extractor) if cfg.use_embedding else None,
        cfg.checkpoint_dir / "translator.pt" if cfg.use_embedding and cfg.alpha > 0 else None,
        cfg.device,
    )
    manifest = _select(_manifest(cfg), "FS", _eval_splits(cfg))
    translated = translate_manifest(
        models, manifest, cfg.guidance, cfg.alpha, out_dir, cfg.seed, cfg.data_root, cfg.use_embedding
    )
    if tiled:
        comp_path = cfg.data_root / "composites.jsonl"
        if not comp_path.exists():
            raise RejectedInputError(f"Composites not found: {comp_path} (run synth --composites first)")
        translate_manifest(
            models, parse_manifest(comp_path), cfg.guidance, cfg.alpha, out_dir / "tiled", cfg.seed,
            cfg.data_root, cfg.use_embedding, tile_size=cfg.data.tile_size,
        )
    dump_config(cfg, out_dir / "resolved_config.yaml")
    return translated


def _case_sets(patches, embeddings: torch.Tensor) -> List[CaseSet]:
    groups: Dict[str, list] = {}
    labels: Dict[str, str] = {}
    for p, e in zip(patches, embeddings):
        groups.setdefault(p.case_id, []).append(e)
        labels[p.case_id] = p.class_label
    return [CaseSet(cid, labels[cid], groups[cid]) for cid in sorted(groups)]


def cmd_eval(
    cfg: RunConfig, force: bool = False, name: str = "default", translated_dir: Optional[Path] = None,
    out_dir: Optional[Path] = None,
) -> pd.DataFrame:
    """
    Evaluate one translation run against the FFPE reference and the raw FS baseline.

    Writes ``table.csv`` (one row per method), ``metrics.jsonl``, ``case_fd.csv`` and
    ``report.md`` / ``report.html``.
    """
    out_dir = Path(out_dir or cfg.output_root / "eval" / name)
    translated_dir = Path(translated_dir or translation_dir(cfg, name))
    if _done([out_dir / "table.csv"], force, "eval"):
        return pd.read_csv(out_dir / "table.csv")
    manifest_path = translated_dir / "manifest.jsonl"
    if not manifest_path.exists():
        raise RejectedInputError(f"Translated manifest not found: {manifest_path} (run translate first)")

    splits = _eval_splits(cfg)
    df = _manifest(cfg)
    sources = {
        "FFPE": (_select(df, "FFPE", splits), cfg.data_root),
        "Frozen Section": (_select(df, "FS", splits), cfg.data_root),
        name: (_select(parse_manifest(manifest_path), "translated", splits), translated_dir),
    }
    images = {method: _images(cfg, rows, root) for method, (rows, root) in sources.items()}

    records: Dict[str, list] = {method: [] for method in sources}
    case_tables = []
    for extractor in cfg.eval.extractors:
        V = load_extractor(extractor_path(cfg, extractor), cfg.device)
        cases = {method: _case_sets(p, extract(t, V)) for method, (p, t) in images.items()}
        if extractor == cfg.extractor:
            ensemble = train_mil(
                cases["FFPE"], cfg.eval.folds, hidden=cfg.eval.mil_hidden, epochs=cfg.eval.mil_epochs,
                lr=cfg.eval.mil_lr, seed=cfg.seed,
            )
            for method, method_cases in cases.items():
                records[method] += metric_records(evaluate_classification(ensemble, method_cases), extractor=extractor)
        for method in ("Frozen Section", name):
            _, table = dataset_case_fd(cases[method], cases["FFPE"], aggregation=cfg.eval.aggregation)
            records[method] += metric_records(case_table=table, extractor=extractor)
            case_tables.append(table.assign(method=method, extractor=extractor))

    rows = {method: summarize_metrics(recs, cfg.eval.aggregation) for method, recs in records.items()}
    table = build_table(rows, list(cfg.eval.extractors))
    save_table(table, out_dir / "table.csv")
    write_metric_records(
        [{**r, "method": method} for method, recs in records.items() for r in recs], out_dir / "metrics.jsonl"
    )
    case_table = pd.concat(case_tables, ignore_index=True) if case_tables else pd.DataFrame()
    if len(case_table):
        case_table = case_table.pivot_table(index=["case_id", "class", "method"], columns="extractor", values="case_fd")
        case_table = case_table.reset_index()
        case_table.columns.name = None
        case_table.to_csv(out_dir / "case_fd.csv", index=False, float_format="%.6f")
    settings = {
        "S": cfg.guidance.S, "GS": cfg.guidance.GS, "T_inference": cfg.guidance.T_inference,
        "prox_enabled": cfg.guidance.prox_enabled, "q": cfg.guidance.q, "alpha": cfg.alpha,
        "lora_rank": cfg.model.lora_rank, "use_embedding": cfg.use_embedding, "split": cfg.eval.split,
        "seed": cfg.seed,
    }
    save_report(generate_markdown_report(table, settings, case_table), out_dir / "report")
    dump_config(cfg, out_dir / "resolved_config.yaml")
    logger.info("stage=eval out=%s\n%s", out_dir, table.to_string(index=False))
    return table


def _point_config(cfg: RunConfig, axis: str, value) -> RunConfig:
    point = replace_key(cfg, SWEEP_AXES[axis], value)
    # data and shared checkpoints stay where the parent run keeps them
    point = replace_key(point, "data.root", str(cfg.data_root))
    return replace_key(point, "paths.checkpoint_dir", str(cfg.checkpoint_dir))


def _run_point(cfg: RunConfig, axis: str, value, sweep_dir: Path, force: bool) -> dict:
    point_dir = sweep_dir / f"{axis}={value}"
    row = {"axis": axis, "axis_value": value, "error": ""}
    try:
        point = replace_key(_point_config(cfg, axis, value), "paths.output_root", str(point_dir))
        ldm_path = None
        if axis in RETRAIN_AXES:
            # the no-embedding arm gets its own phase-1 base, trained once and shared
            lora_only = (point.checkpoint_dir / base_filename(point)).exists()
            ldm_path = cmd_train_ldm(point, force, lora_only=lora_only, out_path=point_dir / ldm_filename(point))
        cmd_translate(point, force, name="point", ldm_path=ldm_path)
        table = cmd_eval(point, force, name="point")
        result = table[table["Method"] == "point"].iloc[0].to_dict()
        row.update({k: v for k, v in result.items() if k != "Method"})
    except (F2FError, OSError) as e:
        logger.error("stage=sweep axis=%s value=%s error=%s", axis, value, e)
        row["error"] = f"{type(e).__name__}: {e}"
    return row


def cmd_sweep(cfg: RunConfig, axis: str, values: Sequence, force: bool = False) -> pd.DataFrame:
    """
    Translate and evaluate once per value of ``axis``; writes ``results.csv`` and one plot per metric.

    Failed points keep their row with the error message and the sweep continues.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis (allowed: {sorted(SWEEP_AXES)})", "axis")
    if not values:
        raise ConfigError("a sweep needs at least one value", "values")
    sweep_dir = cfg.output_root / "sweeps" / axis

    def run(value):
        return _run_point(cfg, axis, value, sweep_dir, force)

    if cfg.sweep_workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.sweep_workers) as pool:
            rows = list(pool.map(run, values))
    else:
        rows = [run(v) for v in values]

    results = pd.DataFrame(rows)
    sweep_dir.mkdir(parents=True, exist_ok=True)
    results.to_csv(sweep_dir / "results.csv", index=False, float_format="%.6f")
    plot_sweep(results, axis, sweep_dir)
    dump_config(cfg, sweep_dir / "resolved_config.yaml")
    return results


def plot_sweep(results: pd.DataFrame, axis: str, out_dir: Path) -> List[Path]:
    """One line plot per metric column (AUC, Acc, CaseFD[...]) against the axis value."""
    metrics = [c for c in results.columns if c in ("AUC", "Acc") or c.startswith("CaseFD[")]
    ok = results[results["error"] == ""] if "error" in results.columns else results
    paths = []
    for metric in metrics:
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        x = [str(v) for v in ok["axis_value"]]
        ax.plot(x, ok[metric].astype(float), marker="o")
        ax.set_xlabel(axis)
        ax.set_ylabel(metric)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        safe = metric.replace("[", "_").replace("]", "")
        path = out_dir / f"{safe}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def cmd_all(cfg: RunConfig, force: bool = False) -> pd.DataFrame:
    cmd_synth(cfg, force)
    cmd_train_extractor(cfg, force)
    cmd_train_ldm(cfg, force)
    if cfg.use_embedding:
        cmd_train_translator(cfg, force)
    cmd_translate(cfg, force)
    return cmd_eval(cfg, force)


# ---------------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    parser = argparse.ArgumentParser(prog="f2f", description="Frozen-section to FFPE translation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common])
    p.add_argument("--composites", action="store_true")
    sub.add_parser("train-extractor", parents=[common])
    p = sub.add_parser("train-ldm", parents=[common])
    p.add_argument("--lora-only", action="store_true")
    sub.add_parser("train-translator", parents=[common])
    p = sub.add_parser("translate", parents=[common])
    p.add_argument("--name", default="default")
    p.add_argument("--tiled", action="store_true")
    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--name", default="default")
    p = sub.add_parser("sweep", parents=[common])
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, nargs="+")
    sub.add_parser("all", parents=[common])
    return parser


def error_payload(e: Exception) -> dict:
    payload = {"error": type(e).__name__, "message": str(e)}
    if isinstance(e, ConfigError):
        payload["key_path"] = e.key_path
    if isinstance(e, NumericalFault):
        payload["stage"] = e.stage
    if isinstance(e, TrainingFault):
        payload["details"] = e.details
    return payload


def run(args: argparse.Namespace, cfg: RunConfig):
    if args.command == "synth":
        return cmd_synth(cfg, args.force, args.composites)
    if args.command == "train-extractor":
        return cmd_train_extractor(cfg, args.force)
    if args.command == "train-ldm":
        return cmd_train_ldm(cfg, args.force, args.lora_only)
    if args.command == "train-translator":
        return cmd_train_translator(cfg, args.force)
    if args.command == "translate":
        return cmd_translate(cfg, args.force, args.name, args.tiled)
    if args.command == "eval":
        return cmd_eval(cfg, args.force, args.name)
    if args.command == "sweep":
        return cmd_sweep(cfg, args.axis, [yaml.safe_load(v) for v in args.values], args.force)
    return cmd_all(cfg, args.force)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = load_config(args.config, parse_overrides(extra))
        configure_logging(cfg.log_level)
        seed_everything(cfg.seed)
        logger.info("command=%s output_root=%s seed=%d", args.command, cfg.output_root, cfg.seed)
        run(args, cfg)
    except (F2FError, OSError) as e:
        print(json.dumps(error_payload(e), default=str), file=sys.stderr)
        return 2 if isinstance(e, ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
