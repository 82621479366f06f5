import pytest
import yaml

from app.config import (
    OUTPUT_ROOT_ENV, RunConfig, apply_overrides, config_from_dict, dump_config, load_config, replace_key,
)
from app.errors import ConfigError


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


def test_defaults_are_valid():
    cfg = load_config()
    assert isinstance(cfg, RunConfig)
    assert cfg.guidance.GS == 4.0
    assert cfg.eval.split == "all"
    assert cfg.checkpoint_dir == cfg.output_root / "checkpoints"


def test_file_values_and_scientific_strings(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    path = write_yaml(tmp_path / "run.yaml", {"seed": 7, "schedule": {"beta_start": "1e-4"}, "guidance": {"S": 0.5}})
    cfg = load_config(path)
    assert cfg.seed == 7
    assert cfg.schedule.beta_start == pytest.approx(1e-4)
    assert cfg.guidance.n_steps == 25


def test_unknown_key_names_its_path(tmp_path):
    path = write_yaml(tmp_path / "run.yaml", {"guidance": {"gs": 3.0}})
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.key_path == "guidance.gs"


def test_type_errors_name_their_path():
    with pytest.raises(ConfigError) as info:
        config_from_dict({"guidance": {"prox_enabled": "yes"}})
    assert info.value.key_path == "guidance.prox_enabled"
    with pytest.raises(ConfigError) as info:
        config_from_dict({"data": {"n_cases": 3.5}})
    assert info.value.key_path == "data.n_cases"


@pytest.mark.parametrize(
    "data,key",
    [
        ({"guidance": {"S": 1.5}}, "guidance.S"),
        ({"guidance": {"q": 1.0}}, "guidance.q"),
        ({"guidance": {"lambda_rule": "other"}}, "guidance.lambda_rule"),
        ({"alpha": -0.1}, "alpha"),
        ({"data": {"n_cases": 10}}, "data.n_cases"),
        ({"eval": {"aggregation": "max"}}, "eval.aggregation"),
        ({"guidance": {"T_inference": 2000}}, "guidance.T_inference"),
    ],
)
def test_range_checks(data, key):
    with pytest.raises(ConfigError) as info:
        config_from_dict(data)
    assert info.value.key_path == key


def test_overrides_parse_yaml_scalars(monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    cfg = load_config(overrides=[("guidance.GS", "12.0"), ("guidance.prox_enabled", "true"), ("alpha", "0")])
    assert cfg.guidance.GS == 12.0
    assert cfg.guidance.prox_enabled is True
    assert cfg.alpha == 0.0
    with pytest.raises(ConfigError):
        apply_overrides({"guidance": {"GS": 1.0}}, [("guidance.nope", "1")])
    with pytest.raises(ConfigError):
        apply_overrides({"guidance": {"GS": 1.0}}, [("missing.GS", "1")])


def test_env_var_sets_output_root_before_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "env"))
    assert load_config().output_root == tmp_path / "env"
    cfg = load_config(overrides=[("paths.output_root", str(tmp_path / "cli"))])
    assert cfg.output_root == tmp_path / "cli"


def test_replace_key_returns_validated_copy():
    cfg = load_config()
    changed = replace_key(cfg, "guidance.S", 0.3)
    assert changed.guidance.S == 0.3
    assert cfg.guidance.S == 0.7
    with pytest.raises(ConfigError):
        replace_key(cfg, "guidance.S", 2.0)


def test_dump_config_round_trips(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    cfg = replace_key(load_config(), "eval.folds", 3)
    path = dump_config(cfg, tmp_path / "snap" / "resolved_config.yaml")
    assert load_config(path) == cfg
