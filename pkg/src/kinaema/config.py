"""Experiment configuration: one sectioned TOML/JSON file plus ``section.key=value`` overrides."""
from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from kinaema.errors import ConfigError
from kinaema.memory import ModelSpec
from kinaema.training import TrainConfig
from kinaema.world import WorldConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


@dataclass
class EvalConfig:
    lengths: list[int] = field(default_factory=lambda: [40, 80, 160, 320])
    batch_size: int = 16
    episodes: int | None = None


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}


SECTIONS = {"world": WorldConfig, "model": ModelSpec, "train": TrainConfig, "eval": EvalConfig}


def _coerce(section: str, key: str, value, annotation: str):
    """Convert ``value`` (possibly a raw override string) to the field's declared type."""
    where = f"{section}.{key}"
    optional = "None" in annotation
    if optional and (value is None or (isinstance(value, str) and value.lower() in ("none", "null", ""))):
        return None
    base = annotation.replace(" | None", "").strip()
    try:
        if base == "bool":
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes", "on"):
                    return True
                if value.lower() in ("false", "0", "no", "off"):
                    return False
                raise ValueError(value)
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if base == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if base == "float":
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if base == "str":
            return str(value)
        if base.startswith("list"):
            items = value.split(",") if isinstance(value, str) else list(value)
            return [int(v) for v in items]
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot use {value!r} as {annotation}") from None
    raise ConfigError(f"{where}: unsupported field type {annotation}")


def _build(section: str, values: dict):
    cls = SECTIONS[section]
    types = {f.name: f.type if isinstance(f.type, str) else f.type.__name__ for f in fields(cls)}
    unknown = set(values) - set(types)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    kwargs = {k: _coerce(section, k, v, types[k]) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        if path.suffix == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a table")
    return data


def parse_override(text: str) -> tuple[str, str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, value = text.split("=", 1)
    if key.count(".") != 1:
        raise ConfigError(f"override key {key!r} must be section.key")
    section, name = key.split(".")
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}; expected one of {sorted(SECTIONS)}")
    return section, name, value


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """File values first, then overrides; every key must name an existing field."""
    data = read_config_file(path) if path else {}
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    merged = {name: dict(data.get(name, {})) for name in SECTIONS}
    for text in overrides:
        section, key, value = parse_override(text)
        merged[section][key] = value
    cfg = ExperimentConfig(**{name: _build(name, merged[name]) for name in SECTIONS})
    cfg.world.validate()
    cfg.train.validate()
    if cfg.model.retina_dim != cfg.world.retina_dim:
        if "retina_dim" in merged["model"]:
            raise ConfigError(f"model.retina_dim {cfg.model.retina_dim} != world retina width "
                              f"{cfg.world.retina_dim}")
        cfg = replace(cfg, model=replace(cfg.model, retina_dim=cfg.world.retina_dim))
    cfg.model.validate()
    return cfg
