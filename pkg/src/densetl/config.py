"""Experiment configuration: dataclasses plus a flat ``key = value`` file format.

Example::

    # toy run on generated data
    epochs = 30
    input_size = 32
    synthetic.enabled = true
    densenet.preset = toy
    head.neurons = 32
    optimizer.kind = adam

Unknown keys are rejected. Command-line flags override file values.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .data import AugmentSpec
from .densenet import ConfigError, DenseNetConfig, HeadConfig
from .optim import OptimizerHyper

PRESETS = ("densenet201", "toy")


@dataclass
class DenseNetSection:
    preset: str = "densenet201"
    block_layers: Optional[list[int]] = None
    growth_rate: Optional[int] = None
    bottleneck_width: Optional[int] = None
    compression: Optional[float] = None
    stem_channels: Optional[int] = None


@dataclass
class HeadSection:
    neurons: int = 512
    dropout: float = 0.1
    activation: str = "relu"
    classes: int = 3


@dataclass
class OptimizerSection:
    kind: str = "adam"
    learning_rate: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    rho: float = 0.9
    epsilon: float = 1e-7


@dataclass
class AugmentSection:
    enabled: bool = True
    rotation: float = 20.0
    hflip: float = 0.5
    vflip: float = 0.5


@dataclass
class SyntheticSection:
    enabled: bool = False
    task: str = "B"
    per_class: int = 40
    seed: Optional[int] = None  # defaults to the run seed


@dataclass
class ExperimentConfig:
    data_dir: Optional[str] = None
    test_dir: Optional[str] = None
    input_size: int = 224
    epochs: int = 100
    batch_size: int = 64
    train_fraction: float = 0.8
    seed: int = 0
    freeze: bool = True
    backbone_weights: Optional[str] = None
    out: str = "runs/default"
    densenet: DenseNetSection = field(default_factory=DenseNetSection)
    head: HeadSection = field(default_factory=HeadSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)

    # -- derived objects -------------------------------------------------

    def densenet_config(self) -> DenseNetConfig:
        d = self.densenet
        if d.preset not in PRESETS:
            raise ConfigError(f"unknown densenet preset {d.preset!r}; expected one of {PRESETS}")
        base = DenseNetConfig.densenet201() if d.preset == "densenet201" else DenseNetConfig.toy()
        overrides: dict[str, Any] = {"input_size": (self.input_size, self.input_size, 3)}
        for key in ("block_layers", "growth_rate", "bottleneck_width", "compression", "stem_channels"):
            value = getattr(d, key)
            if value is not None:
                overrides[key] = value
        if "growth_rate" in overrides and d.bottleneck_width is None:
            overrides["bottleneck_width"] = 4 * overrides["growth_rate"]
        cfg = dataclasses.replace(base, **overrides)
        cfg.validate()
        return cfg

    def head_config(self) -> HeadConfig:
        h = HeadConfig(self.head.neurons, self.head.dropout, self.head.activation, self.head.classes)
        h.validate()
        return h

    def optimizer_hyper(self) -> OptimizerHyper:
        o = self.optimizer
        try:
            return OptimizerHyper(o.kind, o.learning_rate, o.beta1, o.beta2, o.momentum, o.rho, o.epsilon)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def augment_spec(self) -> Optional[AugmentSpec]:
        a = self.augment
        try:
            spec = AugmentSpec(a.rotation, a.hflip, a.vflip)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return spec if a.enabled else None

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.input_size < 1:
            raise ConfigError("input_size must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if not self.synthetic.enabled and not self.data_dir:
            raise ConfigError("set data_dir or enable synthetic data")
        if self.synthetic.per_class < 1:
            raise ConfigError("synthetic.per_class must be >= 1")
        self.densenet_config()
        self.head_config()
        self.optimizer_hyper()
        self.augment_spec()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def copy(self) -> "ExperimentConfig":
        return from_dict(self.to_dict())


# ---------------------------------------------------------------------------
# flat key/value handling
# ---------------------------------------------------------------------------

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(raw: Any, type_str: str, key: str) -> Any:
    optional = type_str.startswith("Optional[")
    inner = type_str[len("Optional["):-1] if optional else type_str
    if isinstance(raw, str):
        text = raw.strip()
        if optional and text.lower() in ("none", "null", ""):
            return None
    elif raw is None:
        if optional:
            return None
        raise ConfigError(f"{key}: value required")
    else:
        text = raw
    try:
        if inner == "bool":
            if isinstance(text, bool):
                return text
            low = str(text).lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if inner == "int":
            if isinstance(text, float) or (isinstance(text, str) and not text.lstrip("-").isdigit()):
                raise ValueError(text)
            return int(text)
        if inner == "float":
            return float(text)
        if inner == "str":
            return str(text)
        if inner == "list[int]":
            if isinstance(text, (list, tuple)):
                return [int(v) for v in text]
            items = text.strip("[]() ").split(",")
            return [int(v) for v in items if v.strip()]
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {inner}") from None
    raise ConfigError(f"{key}: unsupported field type {type_str}")


def _field_types(cls) -> dict[str, str]:
    return {f.name: f.type if isinstance(f.type, str) else f.type.__name__ for f in dataclasses.fields(cls)}


def set_key(cfg: ExperimentConfig, key: str, value: Any) -> None:
    """Assign a dotted key such as ``optimizer.kind``, coercing the value."""
    parts = key.strip().split(".")
    target = cfg
    for part in parts[:-1]:
        sub = getattr(target, part, None)
        if sub is None or not dataclasses.is_dataclass(sub):
            raise ConfigError(f"unknown config key {key!r}")
        target = sub
    name = parts[-1]
    types = _field_types(type(target))
    if name not in types or dataclasses.is_dataclass(getattr(target, name)):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, _coerce(value, types[name], key))


def parse_config_text(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    cfg = base.copy() if base else ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        try:
            set_key(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


def from_dict(d: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()

    def walk(prefix: str, value):
        if isinstance(value, dict):
            for k, v in value.items():
                walk(f"{prefix}.{k}" if prefix else k, v)
        else:
            set_key(cfg, prefix, value)

    walk("", d)
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` in the flat file format (round-trips through ``parse_config_text``)."""
    lines = []

    def walk(prefix: str, value):
        if isinstance(value, dict):
            for k, v in value.items():
                walk(f"{prefix}.{k}" if prefix else k, v)
        else:
            if value is None:
                text = "none"
            elif isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, list):
                text = ",".join(str(v) for v in value)
            else:
                text = str(value)
            lines.append(f"{prefix} = {text}")

    walk("", cfg.to_dict())
    return "\n".join(lines) + "\n"
