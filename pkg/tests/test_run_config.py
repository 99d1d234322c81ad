"""Run configuration resolution and the resolved-config file."""

import pytest
from pydantic import ValidationError

from app.core.error_handling import ConfigError
from app.core.run_config import (
    RESOLVED_CONFIG_FILE, RunConfig, load_config_file, load_resolved_config, resolve_run_config,
    write_resolved_config,
)

pytestmark = pytest.mark.unit


def test_defaults():
    config = resolve_run_config()
    assert config == RunConfig()
    assert config.model == "irene" and config.pooling == "average"
    assert config.lr_drop_epoch == 20


def test_flags_override_file_values(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk run\nepochs=3\nlr=0.001\nDIM=16\nn-self=2\n")
    config = resolve_run_config(load_config_file(path), {"epochs": "5"})
    assert config.epochs == 5
    assert config.lr == pytest.approx(1e-3)
    assert config.dim == 16 and config.n_self == 2


def test_string_values_are_parsed():
    config = resolve_run_config(cli_overrides={"task": "2", "augment": "false", "pooling": "cls",
                                               "grad_clip": "1.5", "metric": "auprc"})
    assert config.task == 2
    assert config.augment is False
    assert config.grad_clip == 1.5
    assert config.resolved_metric(1) == "auprc"


def test_none_clears_nullable_fields_only():
    config = resolve_run_config(cli_overrides={"lr_drop_epoch": "none", "epochs": "none", "ablation": "null"})
    assert config.lr_drop_epoch is None
    assert config.epochs == RunConfig().epochs
    assert config.ablation is None


def test_metric_follows_task_by_default():
    config = RunConfig()
    assert config.resolved_metric(1) == "auroc"
    assert config.resolved_metric(2) == "auprc"


def test_unknown_keys_are_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown configuration key"):
        resolve_run_config(cli_overrides={"epochz": "3"})
    path = tmp_path / "bad.cfg"
    path.write_text("learning_rate=0.1\n")
    with pytest.raises(ConfigError, match="bad.cfg"):
        load_config_file(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config_file(tmp_path / "absent.cfg")


@pytest.mark.parametrize("overrides", [
    {"ablation": "ha9"},
    {"seeds": "1"},
    {"model": "resnet"},
    {"dropout": "1.0"},
    {"task": "3"},
])
def test_invalid_values_fail_validation(overrides):
    with pytest.raises(ValidationError):
        resolve_run_config(cli_overrides=overrides)


def test_resolved_config_round_trip(tmp_path):
    config = resolve_run_config(cli_overrides={"lr": "3e-05", "lr_drop_epoch": "none", "ablation": "uni",
                                               "case_id": "P00003", "augment": "false"})
    path = write_resolved_config(config, tmp_path / "run")
    assert path.name == RESOLVED_CONFIG_FILE
    lines = path.read_text().splitlines()
    assert lines == sorted(lines)
    assert "lr_drop_epoch=none" in lines and "augment=false" in lines
    assert load_resolved_config(tmp_path / "run") == config


def test_resolved_config_is_required(tmp_path):
    with pytest.raises(ConfigError, match="training run directory"):
        load_resolved_config(tmp_path)


def test_derived_configs(tiny_dataset):
    config = RunConfig(dim=16, heads=2, n_self=2, seed=7, epochs=4, lr_drop_epoch=2, vit_depth=1)
    info = tiny_dataset.info
    mdt = config.to_mdt_config(info)
    assert (mdt.n_cc, mdt.n_lab, mdt.class_count, mdt.init_seed) == (8, 8, 2, 7)
    assert config.to_vit_config(info).depth == 1
    assert config.to_fusion_config(info).branch_hidden == config.fusion_hidden
    train = config.to_train_config(info.task)
    assert (train.epochs, train.lr_drop_epoch, train.seed) == (4, 2, 7)
    spec = RunConfig(n=12, seed=3).to_synthetic_spec()
    assert (spec.n_records, spec.seed, spec.cross_modal_fraction) == (12, 3, 0.7)
