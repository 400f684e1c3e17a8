"""Training configuration: defaults, validation and parsing from key=value or JSON files."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .generator import GeneratorConfig
from .losses import LossWeights

FLAGS = ("sdff", "ca", "sknet", "bpfa", "pc")
DTYPES = ("float32", "float64")

# fields that change parameter shapes or the computation; resume/load refuse to mix them
ARCH_FIELDS = ("image_size", "base_channels", "stream_channels", "dtype") + tuple(f"enable_{f}" for f in FLAGS)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 4
    steps: int = 1000
    image_size: int = 64
    base_channels: int = 16
    stream_channels: int | None = None
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    enable_sdff: bool = True
    enable_ca: bool = True
    enable_sknet: bool = True
    enable_bpfa: bool = True
    enable_pc: bool = True
    checkpoint_every: int = 100
    log_every: int = 1
    dtype: str = "float32"
    mask_mode: str = "all"
    freeze_critics: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.image_size < 16 or self.image_size % 8:
            raise ConfigError(f"image_size must be a multiple of 8 and >= 16, got {self.image_size}")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every and log_every must be >= 1")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {DTYPES}, got {self.dtype!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            image_size=self.image_size, base_channels=self.base_channels,
            stream_channels=self.stream_channels,
            **{f"enable_{f}": getattr(self, f"enable_{f}") for f in FLAGS})

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        wkeys = {f.name for f in fields(LossWeights)}
        weights = dict(d.pop("weights", {}) or {})
        for k in list(d):
            # flat files spell loss weights as lambda_<name>
            if k.startswith("lambda_") and k[7:] in wkeys:
                weights[k[7:]] = d.pop(k)
        unknown = sorted(set(d) - known) + sorted(f"lambda_{k}" for k in set(weights) - wkeys)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(weights=LossWeights(**weights), **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_ablations(self, disabled) -> "TrainConfig":
        d = self.to_dict()
        for flag in disabled:
            if flag not in FLAGS:
                raise ConfigError(f"unknown ablation flag {flag!r}")
            d[f"enable_{flag}"] = False
        return TrainConfig.from_dict(d)


def _coerce(key: str, raw: str):
    types = {f.name: f.type for f in fields(TrainConfig)}
    t = str(types.get(key, "float"))
    s = raw.strip()
    if "bool" in t:
        low = s.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if "None" in t and s.lower() in ("none", ""):
        return None
    try:
        if t.startswith("int"):
            return int(s)
        if t == "str":
            return s
        return float(s)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def parse_config_text(text: str) -> TrainConfig:
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad JSON config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("JSON config must be an object")
        return TrainConfig.from_dict(data)
    data = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in data:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        data[key] = value
    known = {f.name for f in fields(TrainConfig)} - {"weights"}
    typed = {}
    for key, value in data.items():
        typed[key] = _coerce(key, value) if key in known else value
    for key in list(typed):
        if key.startswith("lambda_"):
            try:
                typed[key] = float(typed[key])
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {typed[key]!r}") from None
    return TrainConfig.from_dict(typed)


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def diff_fields(a: dict, b: dict, keys=ARCH_FIELDS) -> list[str]:
    return [k for k in keys if a.get(k) != b.get(k)]
