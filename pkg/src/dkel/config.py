"""Nested experiment configuration: YAML file + dotted command-line overrides.

Every key has a default; unknown keys are rejected with their full dotted
path so a typo never silently falls back to a default.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml

from .errors import ConfigurationError
from .mcsim import SimConfig
from .network import NetworkConfig
from .trainer import DataConfig, TrainConfig


@dataclass(frozen=True)
class NetworkSection:
    hidden_dim: int = 32
    feature_dim: int = 16
    num_peers: int = 3
    init_scale: float = 1.0


@dataclass(frozen=True)
class CollapseSection:
    epochs: int = 100
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    window: int = 5
    threshold: float = 1e-3
    # arm (a): coupled teacher pushed toward vanishing logits
    coupled_init_scale: float = 0.01
    coupled_weight_decay: float = 0.5
    # zero-gradient stress variant of arm (a)
    stress_steps: int = 1000
    stress_lr: float = 0.1
    stress_weight_decay: float = 5e-4
    stress_init_scale: float = 0.01


@dataclass(frozen=True)
class ExperimentConfig:
    run_name: str = "run"
    out: str = "runs"
    workers: int = 1
    seeds: Tuple[int, ...] = ()
    ablation: Tuple[str, ...] = ()
    abort_on_collapse: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    collapse: CollapseSection = field(default_factory=CollapseSection)

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(input_dim=2, num_classes=self.data.classes, **asdict(self.network))

    def train_seeds(self) -> List[int]:
        return list(self.seeds) if self.seeds else [self.train.seed]

    def to_dict(self) -> Dict[str, Any]:
        return _plain(asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


_SECTIONS = {"data": DataConfig, "network": NetworkSection, "train": TrainConfig,
             "sim": SimConfig, "collapse": CollapseSection}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(cls, key: str, value, path: str):
    """Convert a YAML/CLI value to the type of the default of ``cls.key``."""
    proto = getattr(cls(), key)
    if isinstance(proto, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path}: expected a list, got {value!r}")
        inner = type(proto[0]) if proto else (str if key in ("ablation", "methods") else int)
        return tuple(inner(v) for v in value)
    if isinstance(proto, bool):
        if isinstance(value, str):
            low = value.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
        if isinstance(value, bool):
            return value
        raise ConfigurationError(f"{path}: expected a boolean, got {value!r}")
    if proto is None:
        # optional float (sim.gt_noise)
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null", "")):
            return None
        return float(value)
    try:
        if isinstance(proto, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(proto, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{path}: cannot interpret {value!r} as {type(proto).__name__}") from None


def _section(cls, raw, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in names:
            raise ConfigurationError(f"unknown config key {path}.{key}")
        kwargs[key] = _coerce(cls, key, value, f"{path}.{key}")
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from None


def build_config(raw: Optional[dict]) -> ExperimentConfig:
    raw = dict(raw or {})
    top = {f.name for f in fields(ExperimentConfig)} - set(_SECTIONS)
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _section(_SECTIONS[key], value, key)
        elif key in top:
            kwargs[key] = _coerce(ExperimentConfig, key, value, key)
        else:
            raise ConfigurationError(f"unknown config key {key}")
    return ExperimentConfig(**kwargs)


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``a.b=value`` strings to a nested dict; values are parsed as YAML scalars."""
    raw = _plain(dict(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        path, text = item.split("=", 1)
        keys = path.strip().split(".")
        if not all(keys):
            raise ConfigurationError(f"malformed override key {path!r}")
        node = raw
        for k in keys[:-1]:
            child = node.get(k)
            if child is None:
                child = node[k] = {}
            if not isinstance(child, dict):
                raise ConfigurationError(f"override {path!r}: {k} is not a section")
            node = child
        node[keys[-1]] = yaml.safe_load(text) if text.strip() else None
    return raw


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigurationError(f"config {path} must be a mapping at the top level")
    return build_config(apply_overrides(raw, overrides))


def with_updates(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """``replace`` that also accepts ``section={'key': value}`` partial updates."""
    kwargs = {}
    for name, value in sections.items():
        if name in _SECTIONS and isinstance(value, dict):
            kwargs[name] = replace(getattr(cfg, name), **value)
        else:
            kwargs[name] = value
    return replace(cfg, **kwargs)
