"""
config.py

Declarative run configuration for every command of the f2f tool.

Main features:
- A tree of dataclasses holding every tunable (schedule, guidance, model, optimizer,
  training budgets, translator, dataset, artifacts, evaluation, paths).
- YAML loading with unknown-key rejection and per-field type checks.
- Dotted command-line overrides such as ``--guidance.GS 12.0``.
- Resolved-config snapshots written next to every output.

Functions:
    load_config(path=None, overrides=None): Build a validated RunConfig.
    config_from_dict(data): Build a RunConfig from a nested dict.
    apply_overrides(data, overrides): Apply dotted-key overrides to a nested dict.
    dump_config(cfg, path): Write the resolved configuration as YAML.
"""

import dataclasses
import math
import os
import typing
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

import yaml

from app.errors import ConfigError

OUTPUT_ROOT_ENV = "F2F_OUTPUT_ROOT"

LAMBDA_RULES = ("threshold", "lambda")
AGGREGATIONS = ("mean", "median")
EVAL_SPLITS = ("all", "train", "val", "test")


@dataclass
class ScheduleConfig:
    T_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class GuidanceConfig:
    """Guidance and inversion settings; the only block sweeps mutate besides alpha and rank."""

    GS: float = 4.0
    S: float = 0.7
    T_inference: int = 50
    prox_enabled: bool = False
    q: float = 0.7
    lambda_rule: str = "threshold"

    @property
    def n_steps(self) -> int:
        """Number of inversion (and denoising) steps, round(S * T_inference) half-up."""
        return int(math.floor(self.S * self.T_inference + 0.5))


@dataclass
class ModelConfig:
    image_size: int = 64
    downsample: int = 4
    latent_channels: int = 4
    vae_channels: int = 32
    base_channels: int = 32
    channel_mults: List[int] = field(default_factory=lambda: [1, 2, 4])
    time_emb_dim: int = 128
    embed_dim: int = 128
    lora_rank: int = 8
    lora_scale: float = 1.0


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch_size: int = 1


@dataclass
class TrainConfig:
    vae_steps: int = 3000
    vae_lr: float = 1e-3
    vae_batch_size: int = 32
    kl_weight: float = 1e-6
    extractor_steps: int = 1500
    extractor_lr: float = 1e-3
    extractor_batch_size: int = 32
    base_steps: int = 20000
    lora_steps: int = 5000
    cfg_dropout: float = 0.1
    roundtrip_samples: int = 8
    log_every: int = 500


@dataclass
class TranslatorConfig:
    steps: int = 2000
    lambda_gp: float = 10.0
    lambda_cyc: float = 10.0
    n_critic: int = 5
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    batch_size: int = 64
    identity_init: bool = True


@dataclass
class ArtifactConfig:
    fold_density: float = 0.6
    streak_width: int = 3
    ice_hole_rate: float = 1.5
    hole_radius: List[int] = field(default_factory=lambda: [2, 5])
    color_shift: List[float] = field(default_factory=lambda: [0.05, -0.06, 0.04])
    blur_sigma: float = 0.8


@dataclass
class DataConfig:
    root: str = ""
    n_cases: int = 36
    patches_per_case: int = 16
    split_ratios: List[float] = field(default_factory=lambda: [0.7, 0.15, 0.15])
    image_size: int = 64
    composite_size: int = 1024
    tile_size: int = 256
    workers: int = 1


@dataclass
class EvalConfig:
    folds: int = 6
    extractors: List[str] = field(default_factory=lambda: ["toy", "random"])
    aggregation: str = "mean"
    split: str = "all"
    mil_hidden: int = 64
    mil_epochs: int = 200
    mil_lr: float = 1e-3


@dataclass
class PathsConfig:
    output_root: str = "runs"
    checkpoint_dir: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    alpha: float = 0.25
    use_embedding: bool = True
    extractor: str = "toy"
    device: str = "cpu"
    log_level: str = "INFO"
    sweep_workers: int = 1
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    translator: TranslatorConfig = field(default_factory=TranslatorConfig)
    artifacts: ArtifactConfig = field(default_factory=ArtifactConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def output_root(self) -> Path:
        return Path(self.paths.output_root)

    @property
    def data_root(self) -> Path:
        return Path(self.data.root) if self.data.root else self.output_root / "data"

    @property
    def checkpoint_dir(self) -> Path:
        if self.paths.checkpoint_dir:
            return Path(self.paths.checkpoint_dir)
        return self.output_root / "checkpoints"


def _coerce(value, tp, key_path: str):
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"expected a mapping, got {type(value).__name__}", key_path)
        return _build(tp, value, key_path)
    origin = typing.get_origin(tp)
    if origin in (list, List):
        (item_tp,) = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", key_path)
        return [_coerce(v, item_tp, f"{key_path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", key_path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key_path)
        return value
    if tp is float:
        if isinstance(value, bool):
            raise ConfigError(f"expected a number, got {value!r}", key_path)
        if isinstance(value, str):
            # YAML 1.1 reads "1e-4" as a string
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"expected a number, got {value!r}", key_path) from None
        if not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key_path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key_path)
        return value
    raise ConfigError(f"unsupported field type {tp}", key_path)


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        path = f"{prefix}.{unknown[0]}" if prefix else unknown[0]
        raise ConfigError(f"unknown key (allowed: {sorted(names)})", path)
    kwargs = {}
    for name, value in data.items():
        path = f"{prefix}.{name}" if prefix else name
        kwargs[name] = _coerce(value, hints[name], path)
    return cls(**kwargs)


def _check(condition: bool, message: str, key_path: str):
    if not condition:
        raise ConfigError(message, key_path)


def validate_config(cfg: RunConfig) -> RunConfig:
    """
    Check value ranges that the type system cannot express.

    Raises:
        ConfigError: naming the dotted key of the first offending value.
    """
    g = cfg.guidance
    _check(0.0 <= g.S <= 1.0, f"must lie in [0, 1], got {g.S}", "guidance.S")
    _check(g.GS >= 0.0 and math.isfinite(g.GS), f"must be finite and >= 0, got {g.GS}", "guidance.GS")
    _check(0.0 < g.q < 1.0, f"must lie in (0, 1), got {g.q}", "guidance.q")
    _check(g.T_inference >= 1, "must be >= 1", "guidance.T_inference")
    _check(g.lambda_rule in LAMBDA_RULES, f"must be one of {LAMBDA_RULES}", "guidance.lambda_rule")
    _check(cfg.schedule.T_train >= 2, "must be >= 2", "schedule.T_train")
    _check(g.T_inference <= cfg.schedule.T_train, "cannot exceed schedule.T_train", "guidance.T_inference")
    _check(0.0 <= cfg.alpha <= 1.0, f"must lie in [0, 1], got {cfg.alpha}", "alpha")
    _check(cfg.model.lora_rank >= 1, "must be >= 1", "model.lora_rank")
    f = cfg.model.downsample
    _check(f >= 2 and f & (f - 1) == 0, "must be a power of two >= 2", "model.downsample")
    _check(cfg.data.image_size % f == 0, "must be divisible by model.downsample", "data.image_size")
    _check(len(cfg.data.split_ratios) == 3, "needs train/val/test ratios", "data.split_ratios")
    _check(abs(sum(cfg.data.split_ratios) - 1.0) < 1e-6, "ratios must sum to 1", "data.split_ratios")
    _check(cfg.data.n_cases % 3 == 0, "must be divisible by 3 for class balance", "data.n_cases")
    _check(len(cfg.artifacts.hole_radius) == 2, "needs [min, max]", "artifacts.hole_radius")
    _check(len(cfg.artifacts.color_shift) == 3, "needs one offset per channel", "artifacts.color_shift")
    _check(cfg.eval.aggregation in AGGREGATIONS, f"must be one of {AGGREGATIONS}", "eval.aggregation")
    _check(cfg.eval.split in EVAL_SPLITS, f"must be one of {EVAL_SPLITS}", "eval.split")
    _check(cfg.eval.folds >= 2, "must be >= 2", "eval.folds")
    _check(0.0 <= cfg.train.cfg_dropout < 1.0, "must lie in [0, 1)", "train.cfg_dropout")
    return cfg


def config_from_dict(data: Optional[dict]) -> RunConfig:
    """Build and validate a RunConfig from a nested dict (missing keys keep defaults)."""
    return validate_config(_build(RunConfig, data or {}))


def apply_overrides(data: dict, overrides: Iterable[Tuple[str, str]]) -> dict:
    """
    Apply dotted-key overrides to a nested config dict.

    Args:
        data (dict): Nested dict, typically ``asdict(RunConfig())`` merged with a file.
        overrides: Pairs of (dotted key, raw string value); values are parsed as YAML scalars.

    Returns:
        dict: The same dict, modified in place.

    Raises:
        ConfigError: If a key path does not exist.
    """
    for key, raw in overrides:
        node = data
        parts = key.split(".")
        for i, part in enumerate(parts[:-1]):
            if not isinstance(node.get(part), dict):
                raise ConfigError("unknown key", ".".join(parts[: i + 1]))
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError("unknown key", key)
        node[parts[-1]] = yaml.safe_load(raw) if isinstance(raw, str) else raw
    return data


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    for key, value in update.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in base:
            raise ConfigError("unknown key", path)
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, path)
        else:
            base[key] = value
    return base


def load_config(path: Union[str, Path, None] = None, overrides: Iterable[Tuple[str, str]] = ()) -> RunConfig:
    """
    Load a RunConfig from an optional YAML file plus dotted overrides.

    The ``F2F_OUTPUT_ROOT`` environment variable, when set, replaces ``paths.output_root``
    after the file is read but before command-line overrides.

    Raises:
        ConfigError: On unknown keys, wrong types or out-of-range values.
    """
    data = asdict(RunConfig())
    if path is not None:
        with open(path, "r") as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("top level must be a mapping", str(path))
        _merge(data, loaded)
    env_root = os.environ.get(OUTPUT_ROOT_ENV)
    if env_root:
        data["paths"]["output_root"] = env_root
    apply_overrides(data, overrides)
    return config_from_dict(data)


def replace_key(cfg: RunConfig, key: str, value) -> RunConfig:
    """Return a validated copy of ``cfg`` with one dotted key set to ``value``."""
    data = asdict(cfg)
    apply_overrides(data, [(key, value)])
    return config_from_dict(data)


def dump_config(cfg: RunConfig, path: Union[str, Path]) -> Path:
    """Write the resolved configuration snapshot and return its path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(asdict(cfg), f, sort_keys=False)
    return path
