"""Dataclass configs and the flat ``section.key = value`` config format."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

FAMILIES = ("dcgan3d", "stylegan3d", "biggan3d")
LOSSES = ("relativistic", "standard")

LATENT_DIM = 512
PATCH_SHAPE = (32, 64, 64)
MINIBATCHES_PER_SCAN = 14


class ConfigError(ValueError):
    """Invalid configuration value; ``key`` names the offending entry."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value.strip())
    if isinstance(value, float):
        return Fraction(value).limit_denominator(4096)
    return Fraction(value)


def scale_channels(channels: int, multiplier) -> int:
    """Channel count at a given width multiplier.

    Non-integral products are rounded up so that every family stays buildable
    at width 1/8; anything below one channel is rejected.
    """
    m = as_fraction(multiplier)
    if m <= 0:
        raise ConfigError(f"width_multiplier must be positive, got {multiplier}", "width_multiplier")
    scaled = channels * m
    if scaled < 1:
        raise ConfigError(
            f"width_multiplier {multiplier} shrinks {channels} channels below 1", "width_multiplier"
        )
    return math.ceil(scaled)


@dataclass
class GeneratorConfig:
    family: str = "stylegan3d"
    width_multiplier: Fraction = Fraction(1)
    seed: int = 0

    def __post_init__(self):
        self.width_multiplier = as_fraction(self.width_multiplier)
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown generator family {self.family!r}", "generator.family")
        if self.width_multiplier <= 0:
            raise ConfigError("width_multiplier must be positive", "generator.width_multiplier")


@dataclass
class DiscriminatorConfig:
    use_mdmin: bool = False
    width_multiplier: Fraction = Fraction(1)
    seed: int = 0

    def __post_init__(self):
        self.width_multiplier = as_fraction(self.width_multiplier)
        if self.width_multiplier <= 0:
            raise ConfigError("width_multiplier must be positive", "discriminator.width_multiplier")


@dataclass
class LargeEbsConfig:
    enabled: bool = False
    candidate_count: int = 192
    keep_count: int = 48
    warmup_epochs: int = 5
    tap_layer: int = 8

    def __post_init__(self):
        if not 2 <= self.keep_count <= self.candidate_count:
            raise ConfigError(
                f"need 2 <= keep_count <= candidate_count, got k={self.keep_count}, "
                f"N={self.candidate_count}",
                "largeebs.keep_count",
            )


@dataclass
class FidEvalConfig:
    enabled: bool = True
    n_samples: int = 10_000
    extractor: str = "random2d"
    weights: str | None = None
    batch_size: int = 50


@dataclass
class TrainConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    loss: str = "relativistic"
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    epochs: int = 20
    batch_size: int = 48
    patches_per_scan: int = 672
    style_mixing_probability: float = 0.9
    largeebs: LargeEbsConfig = field(default_factory=LargeEbsConfig)
    fid: FidEvalConfig = field(default_factory=FidEvalConfig)
    seed: int = 0
    deterministic: bool = True
    max_iterations: int | None = None
    log_every: int = MINIBATCHES_PER_SCAN

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}", "loss")
        if self.batch_size * MINIBATCHES_PER_SCAN != self.patches_per_scan:
            raise ConfigError(
                f"batch_size x {MINIBATCHES_PER_SCAN} must equal patches_per_scan "
                f"({self.batch_size} x {MINIBATCHES_PER_SCAN} != {self.patches_per_scan})",
                "patches_per_scan",
            )
        if not 0.0 <= self.style_mixing_probability <= 1.0:
            raise ConfigError("style_mixing_probability must lie in [0, 1]", "style_mixing_probability")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", "epochs")
        if self.largeebs.enabled and self.largeebs.keep_count != self.batch_size:
            raise ConfigError(
                f"largeebs.keep_count ({self.largeebs.keep_count}) must equal batch_size ({self.batch_size})",
                "largeebs.keep_count",
            )


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``[section]`` headers prefix later keys."""
    out: dict[str, str] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}", f"line {lineno}")
        key, value = (s.strip() for s in line.split("=", 1))
        if section:
            key = f"{section}.{key}"
        out[key] = value
    return out


def read_config_file(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text())


def format_config(values: dict[str, Any]) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in sorted(values.items()))


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(key: str, raw, type_name: str):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if "None" in type_name and text.lower() in ("none", ""):
        return None
    base = type_name.replace("| None", "").strip()
    try:
        if base == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
        if base == "Fraction":
            return Fraction(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"invalid value {raw!r} for {key}", key) from exc
    return text


_SECTIONS = {
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "largeebs": LargeEbsConfig,
    "fid": FidEvalConfig,
}


def train_config_from_flat(values: dict[str, Any]) -> TrainConfig:
    """Build a TrainConfig from dotted keys, e.g. ``generator.family``."""
    top: dict[str, Any] = {}
    nested: dict[str, dict[str, Any]] = {name: {} for name in _SECTIONS}
    top_fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    for key, raw in values.items():
        if "." in key:
            section, sub = key.split(".", 1)
            cls = _SECTIONS.get(section)
            if cls is None:
                raise ConfigError(f"unknown config section {section!r}", key)
            types = {f.name: f.type for f in dataclasses.fields(cls)}
            if sub not in types:
                raise ConfigError(f"unknown config key {key!r}", key)
            nested[section][sub] = _coerce(key, raw, types[sub])
        else:
            if key not in top_fields or key in _SECTIONS:
                raise ConfigError(f"unknown config key {key!r}", key)
            top[key] = _coerce(key, raw, top_fields[key])
    built = {}
    for name, cls in _SECTIONS.items():
        try:
            built[name] = cls(**nested[name])
        except ConfigError as exc:
            if exc.key and not exc.key.startswith(name + "."):
                exc.key = f"{name}.{exc.key.split('.')[-1]}"
            raise
    return TrainConfig(**built, **top)


def flatten_config(cfg) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub, v in flatten_config(value).items():
                out[f"{f.name}.{sub}"] = v
        else:
            out[f.name] = value
    return out


def config_hash(values: dict[str, Any]) -> str:
    blob = json.dumps({k: _format_value(v) for k, v in values.items()}, sort_keys=True)
    return hashlib.sha1(blob.encode()).hexdigest()
