"""Configuration handling for MPA pre-training."""

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml

from mpa_pretrain.errors import ConfigError
from mpa_pretrain.model import ModelConfig

BACKBONES = ("bert", "electra")
GUIDANCE_KINDS = ("misprediction", "ground", "constant")
MODE_ALIASES = {"mpa-ground": "electra-mpa-ground", "mpa-constant": "electra-mpa-constant"}
DEFAULT_CONSTANT = {"bert": 0.8, "electra": 0.9}


@dataclass(frozen=True)
class TrainMode:
    """A backbone objective plus an optional attention-guidance variant."""

    name: str
    backbone: str
    guidance: Optional[str] = None

    @classmethod
    def parse(cls, name: str) -> "TrainMode":
        canonical = MODE_ALIASES.get(name, name)
        backbone, _, rest = canonical.partition("-")
        if backbone not in BACKBONES:
            raise ConfigError(f"unknown training mode '{name}'")
        if not rest:
            return cls(canonical, backbone)
        variants = {"mpa": "misprediction", "mpa-ground": "ground", "mpa-constant": "constant"}
        if rest not in variants:
            raise ConfigError(f"unknown training mode '{name}'")
        return cls(canonical, backbone, variants[rest])

    @property
    def uses_mpa(self) -> bool:
        return self.guidance is not None

    @property
    def has_discriminator(self) -> bool:
        return self.backbone == "electra"

    def __str__(self) -> str:
        return self.name


def all_modes() -> list:
    names = list(BACKBONES)
    for backbone in BACKBONES:
        names += [f"{backbone}-mpa", f"{backbone}-mpa-ground", f"{backbone}-mpa-constant"]
    return names + list(MODE_ALIASES)


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01


@dataclass(frozen=True)
class TrainConfig:
    """Configuration settings for one pre-training run (desk-scale defaults)."""

    mode: str = "electra-mpa"
    steps: int = 2000
    batch_size: int = 16
    max_len: int = 128
    lr_peak: float = 5e-4
    warmup_steps: int = 200
    warmup_ratio: Optional[float] = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    weight_decay: float = 0.01
    dropout: float = 0.1
    lam: float = 50.0
    gamma: float = 1.0
    guided_layers: int = 2
    guided_heads: int = 2
    constant_c: Optional[float] = None
    mask_prob: float = 0.15
    sample_argmax: bool = False
    seed: int = 0
    checkpoint_every: int = 1000
    eval_every: int = 0
    log_every: int = 10
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    ffn_dim: int = 512
    generator_layers: int = 4
    generator_hidden: int = 48
    generator_heads: int = 4
    generator_ffn_dim: int = 192
    activation: str = "gelu"

    def __post_init__(self) -> None:
        """Validate configuration after initialization."""
        mode = TrainMode.parse(self.mode)
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.warmup_ratio is not None and not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigError("warmup_ratio must be between 0 and 1")
        if self.warmup_steps < 0 or self.resolved_warmup_steps > self.steps:
            raise ConfigError("warmup_steps must be between 0 and steps")
        for name in ("lr_peak", "adam_eps", "weight_decay", "lam", "gamma", "mask_prob"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 <= self.adam_beta1 < 1.0 or not 0.0 <= self.adam_beta2 < 1.0:
            raise ConfigError("Adam betas must be in [0, 1)")
        if self.mask_prob > 1.0:
            raise ConfigError("mask_prob must be at most 1")
        if self.constant_c is not None and not 0.0 <= self.constant_c <= 1.0:
            raise ConfigError("constant_c must be between 0 and 1")
        for name in ("checkpoint_every", "eval_every", "log_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if mode.uses_mpa and (self.guided_layers < 1 or self.guided_heads < 1):
            raise ConfigError(f"mode '{mode}' needs at least one guided layer and head")
        # Shape checks live in ModelConfig.
        self.main_model_config(vocab_size=8)
        if mode.has_discriminator:
            self.generator_config(vocab_size=8)

    @property
    def train_mode(self) -> TrainMode:
        return TrainMode.parse(self.mode)

    @property
    def resolved_warmup_steps(self) -> int:
        if self.warmup_ratio is not None:
            return int(round(self.warmup_ratio * self.steps))
        return self.warmup_steps

    @property
    def resolved_constant(self) -> float:
        if self.constant_c is not None:
            return self.constant_c
        return DEFAULT_CONSTANT[self.train_mode.backbone]

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.adam_beta1, self.adam_beta2, self.adam_eps, self.weight_decay)

    def main_model_config(self, vocab_size: int) -> ModelConfig:
        """The model the guided heads live in: the discriminator, or the BERT model itself."""
        mode = self.train_mode
        return ModelConfig(
            layers=self.layers,
            heads=self.heads,
            hidden=self.hidden,
            ffn_dim=self.ffn_dim,
            vocab_size=vocab_size,
            max_len=self.max_len,
            guided_layers=self.guided_layers,
            guided_heads=self.guided_heads,
            activation=self.activation,
            dropout=self.dropout,
            head="discriminator" if mode.has_discriminator else "generator",
        )

    def generator_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            layers=self.generator_layers,
            heads=self.generator_heads,
            hidden=self.generator_hidden,
            ffn_dim=self.generator_ffn_dim,
            vocab_size=vocab_size,
            max_len=self.max_len,
            activation=self.activation,
            dropout=self.dropout,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(str(e))

    @classmethod
    def full_scale(cls, mode: str = "electra-mpa") -> "TrainConfig":
        """Full-size hyper-parameters (12-layer base model, 1M steps)."""
        return cls(
            mode=mode,
            steps=1_000_000,
            batch_size=256,
            max_len=512,
            lr_peak=1e-4,
            warmup_steps=10_000,
            guided_layers=5,
            guided_heads=3,
            layers=12,
            hidden=768,
            heads=12,
            ffn_dim=3072,
            generator_layers=12,
            generator_hidden=256,
            generator_heads=4,
            generator_ffn_dim=1024,
            checkpoint_every=10_000,
            log_every=100,
        )

    def with_overrides(self, **overrides: Any) -> "TrainConfig":
        """Copy with every non-None override applied."""
        values = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(values) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **values)


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a YAML (or JSON) mapping of config values."""
    with open(path, encoding="utf-8") as handle:
        try:
            values = yaml.safe_load(handle)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config file {path}: {e}")
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return values


def resolve_config(base: TrainConfig, values: Dict[str, Any]) -> TrainConfig:
    """Apply ``values`` (None entries skipped) on top of ``base``.

    When ``steps`` changes and no warm-up is given, the base warm-up keeps its share of the run.
    """
    settings = {k: v for k, v in values.items() if v is not None}
    steps = settings.get("steps")
    if (
        isinstance(steps, int)
        and not {"warmup_steps", "warmup_ratio"} & set(settings)
        and base.warmup_ratio is None
        and base.steps > 0
    ):
        settings["warmup_steps"] = int(round(base.warmup_steps * max(steps, 0) / base.steps))
    return TrainConfig.from_dict({**base.to_dict(), **settings})


def load_train_config(
    path: Optional[Union[str, Path]] = None, preset: Optional[str] = None, **overrides: Any
) -> TrainConfig:
    """Preset defaults, then file values, then non-None overrides."""
    if preset not in (None, "desk", "full"):
        raise ConfigError(f"unknown preset '{preset}'")
    base = TrainConfig.full_scale() if preset == "full" else TrainConfig()
    values = load_config_file(path) if path is not None else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return resolve_config(base, values)
