"""Configuration dataclasses and the JSON config-file schema.

Layering is defaults < config file < ``section.key=value`` overrides. The
file is JSON with one object per section::

    {"version": 1,
     "model": {"n_latent_tokens": 32, ...},
     "train": {"steps": 2000, "lr": 1e-4, ...},
     "ttd":   {"enabled": true, "granularity": "per_batch", "seed": 0},
     "loss":  {"commitment_weight": 0.25, ...}}
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from onedpiece.errors import ConfigurationError

CONFIG_VERSION = 1


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    n_latent_tokens: int = 32
    codebook_size: int = 4096
    token_dim: int = 12
    encoder_width: int = 128
    encoder_depth: int = 2
    encoder_heads: int = 4
    decoder_width: int = 128
    decoder_depth: int = 2
    decoder_heads: int = 4
    upscaler_channels: int = 32

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigurationError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.codebook_size < 2:
            raise ConfigurationError("codebook_size must be >= 2")
        if self.token_dim < 1 or self.n_latent_tokens < 1 or self.channels < 1:
            raise ConfigurationError("token_dim, n_latent_tokens and channels must be >= 1")
        for kind in ("encoder", "decoder"):
            width = getattr(self, f"{kind}_width")
            heads = getattr(self, f"{kind}_heads")
            if width % heads:
                raise ConfigurationError(f"{kind}_width must be divisible by {kind}_heads")

    @property
    def bits_per_token(self) -> int:
        return max(1, math.ceil(math.log2(self.codebook_size)))

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_size**2


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 1e-4
    eps: float = 1e-8
    warmup_steps: int = 500
    end_lr: float = 1e-5
    grad_clip: float = 1.0
    random_crop: bool = True
    random_flip: bool = True
    reseed_every: int = 500
    checkpoint_every: int = 0  # 0: only the final checkpoint
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigurationError("steps and batch_size must be positive")
        if not self.lr > self.end_lr >= 0:
            raise ConfigurationError("require lr > end_lr >= 0")
        if self.warmup_steps < 0:
            raise ConfigurationError("warmup_steps must be >= 0")


@dataclass
class TTDConfig:
    enabled: bool = True
    granularity: str = "per_batch"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.granularity not in ("per_batch", "per_sample"):
            raise ConfigurationError(f"unknown ttd.granularity {self.granularity!r}")


@dataclass
class LossConfig:
    reconstruction_weight: float = 1.0
    commitment_weight: float = 0.25
    codebook_weight: float = 1.0
    # extension hooks; no built-in implementation
    perceptual_weight: float = 0.0
    gan_weight: float = 0.0


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ttd: TTDConfig = field(default_factory=TTDConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    version: int = CONFIG_VERSION

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Config":
        data = dict(data)
        version = data.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigurationError(f"unsupported config version {version}")
        sections = {}
        for name, sub in _SECTIONS.items():
            raw = data.pop(name, {}) or {}
            known = {f.name for f in dataclasses.fields(sub)}
            unknown = set(raw) - known
            if unknown:
                raise ConfigurationError(f"unknown keys in [{name}]: {sorted(unknown)}")
            sections[name] = sub(**raw)
        if data:
            raise ConfigurationError(f"unknown config sections: {sorted(data)}")
        return cls(**sections)

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: Iterable[str] = ()) -> "Config":
        data: dict[str, Any] = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return apply_overrides(cls.from_dict(data), overrides)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "ttd": TTDConfig, "loss": LossConfig}


def _coerce(value: str, typ: Any, key: str) -> Any:
    typ = str(typ)
    try:
        if typ == "bool":
            lowered = value.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {value!r}") from exc
    return value


def apply_overrides(config: Config, overrides: Iterable[str]) -> Config:
    """Return a new config with ``section.key=value`` overrides applied."""
    data = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override must look like section.key=value: {item!r}")
        key, value = item.split("=", 1)
        section, _, name = key.strip().partition(".")
        sub = _SECTIONS.get(section)
        if sub is None or not name:
            raise ConfigurationError(f"unknown config key {key!r}")
        types = {f.name: f.type for f in dataclasses.fields(sub)}
        if name not in types:
            raise ConfigurationError(f"unknown config key {key!r}")
        data[section][name] = _coerce(value.strip(), types[name], key)
    return Config.from_dict(data)
