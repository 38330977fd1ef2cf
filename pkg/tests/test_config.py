"""Tests for configuration handling."""

import pytest

from mpa_pretrain.config import TrainConfig, TrainMode, all_modes, load_train_config
from mpa_pretrain.errors import ConfigError


def test_config_validation():
    """Test configuration validation."""
    config = TrainConfig(mode="bert-mpa", steps=50, warmup_steps=5, gamma=0.5)
    assert config.train_mode.backbone == "bert"
    assert config.train_mode.guidance == "misprediction"
    assert config.adam.eps == 1e-6
    assert config.main_model_config(100).head == "generator"
    assert TrainConfig().main_model_config(100).head == "discriminator"


@pytest.mark.parametrize(
    "overrides, message",
    [
        ({"steps": 0}, "steps and batch_size must be positive"),
        ({"warmup_steps": 5000}, "warmup_steps must be between 0 and steps"),
        ({"warmup_ratio": 1.5}, "warmup_ratio must be between 0 and 1"),
        ({"gamma": -1.0}, "gamma must be non-negative"),
        ({"lam": -0.1}, "lam must be non-negative"),
        ({"adam_beta2": 1.0}, "Adam betas"),
        ({"mask_prob": 1.5}, "mask_prob must be at most 1"),
        ({"constant_c": 2.0}, "constant_c must be between 0 and 1"),
        ({"log_every": -1}, "log_every must be non-negative"),
        ({"guided_heads": 0}, "needs at least one guided layer and head"),
        ({"guided_layers": 5}, "guided_layers 5 > layers 4"),
        ({"hidden": 130}, "not divisible by heads"),
        ({"generator_hidden": 50}, "not divisible by heads"),
        ({"dropout": 1.0}, "dropout must be in"),
        ({"mode": "gpt"}, "unknown training mode"),
    ],
)
def test_invalid_config(overrides, message):
    """Test that each invalid setting is rejected with a readable message."""
    with pytest.raises(ConfigError, match=message):
        TrainConfig(**overrides)


def test_config_error_is_value_error():
    """Test that configuration errors can be caught as ValueError."""
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_unguided_mode_ignores_guided_counts():
    """Test that plain backbones accept zero guided heads."""
    config = TrainConfig(mode="electra", guided_layers=0, guided_heads=0)
    assert not config.train_mode.uses_mpa


def test_mode_parsing():
    """Test canonical names, aliases and the guidance each mode selects."""
    assert TrainMode.parse("electra") == TrainMode("electra", "electra")
    assert TrainMode.parse("mpa-ground") == TrainMode("electra-mpa-ground", "electra", "ground")
    constant = TrainMode.parse("mpa-constant")
    assert (constant.name, constant.guidance) == ("electra-mpa-constant", "constant")
    assert TrainMode.parse("bert-mpa-constant").backbone == "bert"
    assert not TrainMode.parse("bert").has_discriminator
    assert str(TrainMode.parse("bert-mpa")) == "bert-mpa"
    for name in ("", "electra-xyz", "roberta-mpa"):
        with pytest.raises(ConfigError, match="unknown training mode"):
            TrainMode.parse(name)


def test_all_modes_parse():
    """Test that every advertised mode name parses."""
    modes = all_modes()
    assert {"bert", "electra", "bert-mpa", "electra-mpa", "mpa-ground", "mpa-constant"} <= set(
        modes
    )
    for name in modes:
        TrainMode.parse(name)


def test_resolved_constant_defaults():
    """Test the per-backbone default of the constant ablation."""
    assert TrainConfig(mode="electra-mpa-constant").resolved_constant == 0.9
    assert TrainConfig(mode="bert-mpa-constant").resolved_constant == 0.8
    assert TrainConfig(mode="bert-mpa-constant", constant_c=0.5).resolved_constant == 0.5


def test_from_dict_rejects_unknown_keys():
    """Test that typos in config files are errors instead of silently ignored."""
    with pytest.raises(ConfigError, match="unknown config keys"):
        TrainConfig.from_dict({"step": 10})
    assert TrainConfig.from_dict({"steps": 10, "warmup_steps": 1}).steps == 10


def test_with_overrides():
    """Test that None overrides are skipped and the result is validated."""
    config = TrainConfig()
    updated = config.with_overrides(steps=300, gamma=None)
    assert updated.steps == 300
    assert updated.gamma == config.gamma
    assert config.steps == 2000
    with pytest.raises(ConfigError, match="unknown config keys"):
        config.with_overrides(gama=1.0)
    with pytest.raises(ConfigError):
        config.with_overrides(steps=-1)


def test_full_scale():
    """Test the full-size preset."""
    config = TrainConfig.full_scale("bert-mpa")
    assert (config.layers, config.hidden, config.heads) == (12, 768, 12)
    assert (config.guided_layers, config.guided_heads) == (5, 3)
    assert (config.lr_peak, config.warmup_steps, config.steps) == (1e-4, 10_000, 1_000_000)
    assert (config.lam, config.gamma, config.dropout, config.weight_decay) == (50, 1, 0.1, 0.01)
    assert (config.adam_beta1, config.adam_beta2, config.adam_eps) == (0.9, 0.98, 1e-6)


def test_load_train_config(tmp_path):
    """Test that file values override the preset and keyword overrides win."""
    path = tmp_path / "run.yaml"
    path.write_text("mode: bert-mpa\nsteps: 40\nwarmup_steps: 4\ngamma: 2.0\n")
    config = load_train_config(path, gamma=0.5)
    assert (config.mode, config.steps, config.gamma) == ("bert-mpa", 40, 0.5)

    full = load_train_config(preset="full", steps=100, warmup_steps=10)
    assert (full.hidden, full.steps) == (768, 100)
    assert load_train_config() == TrainConfig()


def test_load_train_config_errors(tmp_path):
    """Test bad presets, malformed YAML and non-mapping files."""
    with pytest.raises(ConfigError, match="unknown preset"):
        load_train_config(preset="huge")
    broken = tmp_path / "broken.yaml"
    broken.write_text("steps: [1, 2\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_train_config(broken)
    listing = tmp_path / "list.yaml"
    listing.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="must contain a mapping"):
        load_train_config(listing)
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert load_train_config(empty) == TrainConfig()


def test_steps_override_scales_warmup(tmp_path):
    """Test that overriding steps alone keeps the base warm-up share, explicit warm-ups win."""
    assert load_train_config(steps=100).warmup_steps == 10
    assert load_train_config(steps=100, warmup_steps=50).warmup_steps == 50
    assert load_train_config(preset="full", steps=2000).warmup_steps == 20
    path = tmp_path / "short.yaml"
    path.write_text("steps: 400\n")
    assert load_train_config(path).warmup_steps == 40
    path.write_text("warmup_steps: 300\n")
    assert load_train_config(path, steps=500).warmup_steps == 300
    path.write_text("warmup_ratio: 0.5\n")
    config = load_train_config(path, steps=100)
    assert (config.warmup_steps, config.resolved_warmup_steps) == (200, 50)
