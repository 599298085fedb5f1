"""Run configuration: nested dataclasses with dotted-path overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .encoder import EncoderConfig
from .posesearch import RegressionConfig
from .reconstruction import ReconWeights


class ConfigError(ValueError):
    pass


@dataclass
class PolarSettings:
    r_min: float = 0.0
    r_max: float = 8.0
    mode: str = "bilinear"

    def __post_init__(self):
        if not 0 <= self.r_min < self.r_max:
            raise ConfigError(f"need 0 <= r_min < r_max, got {self.r_min}, {self.r_max}")
        if self.mode not in ("bilinear", "nearest"):
            raise ConfigError(f"unknown interpolation {self.mode!r}")


@dataclass
class CepaConfig:
    d_p: int = 64
    d_k: int = 32
    H_Q: int | None = None
    pe_kind: str = "sinusoidal"
    phi_hidden: int = 16
    enabled: bool = True
    context: bool = True


@dataclass
class DecoderConfig:
    channels: int = 16
    hidden: int = 64


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-4
    seed: int = 0
    alpha1: float = 1.0
    alpha2: float = 10.0
    tau: float = 0.05
    search_extent: float = 16.0
    train_grid: int = 5
    train_ntheta: int = 16
    test_grid: int = 20
    test_ntheta: int = 64
    align_train_grid: bool = True
    use_match: bool = True
    use_origin: bool = True
    use_cross: bool = True
    use_regression: bool = True
    grad_clip: float | None = None
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0 or not self.tau > 0:
            raise ConfigError("lr and tau must be positive")
        if self.train_grid < 1 or self.test_grid < 1 or self.train_ntheta < 1 or self.test_ntheta < 1:
            raise ConfigError("grid sizes must be >= 1")

    @property
    def recon_weights(self) -> ReconWeights:
        return ReconWeights(self.alpha1, self.alpha2)


@dataclass
class RunConfig:
    polar: PolarSettings = field(default_factory=PolarSettings)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cepa: CepaConfig = field(default_factory=CepaConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    regression: RegressionConfig = field(default_factory=RegressionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


ABLATIONS = {
    "cepa": ("cepa.enabled", False),
    "ce": ("cepa.context", False),
    "recon-origin": ("train.use_origin", False),
    "recon-cross": ("train.use_cross", False),
    "regression": ("train.use_regression", False),
}


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(f'{path}{k}' for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _nested_type(cls, name)
        kwargs[name] = _build(sub, value, f"{path}{name}.") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path.rstrip('.') or 'config'}: {exc}") from exc


def _nested_type(cls, name):
    default = cls.__dataclass_fields__[name].default_factory
    if default is not dataclasses.MISSING and dataclasses.is_dataclass(default):
        return default
    return None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(data: dict, key: str, value) -> None:
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key: {key}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key: {key}")
    node[parts[-1]] = value


def resolve_config(path=None, overrides=(), ablate=(), base: dict | None = None) -> RunConfig:
    """Defaults (or ``base``), then a JSON file, then ``key=value`` overrides, then ablations."""
    data = RunConfig().to_dict() if base is None else base
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        _merge(data, loaded, "")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        set_dotted(data, key.strip(), _parse_value(text.strip()))
    for name in ablate:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        set_dotted(data, *ABLATIONS[name])
    return config_from_dict(data)


def _merge(base: dict, new: dict, path: str) -> None:
    if not isinstance(new, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    for k, v in new.items():
        if k not in base:
            raise ConfigError(f"unknown config key: {path}{k}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, f"{path}{k}.")
        else:
            base[k] = v


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")
