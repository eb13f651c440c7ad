"""Experiment configuration: flat ``section.key = value`` text files."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from typing import Optional

from .nn import ConfigError


@dataclass
class DataConfig:
    n_classes: int = 4
    dims: int = 2
    radius: float = 4.0
    sigma: float = 0.5
    n_per_class: int = 500
    n_test_per_class: int = 250
    val_fraction: float = 0.1
    n_ood: int = 1000
    uniform_inflate: float = 2.0
    gaussian_sigma: float = 2.0
    holdout_radius: float = 8.0


@dataclass
class ModelConfig:
    hidden: tuple = (64, 64)
    feature_dim: int = 16


@dataclass
class LossConfig:
    kind: str = "softmax"
    m: Optional[float] = None            # None: per-kind default
    s: Optional[float] = None
    s_learnable: Optional[bool] = None


@dataclass
class OeConfig:
    enabled: bool = False
    lam: float = 0.5                     # written as oe.lambda
    pairs: str = "all"                   # "all" or "0-1;2-3"
    n_ood: int = 0                       # 0: a quarter of the ID training set
    file: str = ""
    mixup_weight: Optional[float] = None  # None: [1, 1] label; w: (w, 1 - w)


@dataclass
class DdpmConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.04
    hidden: tuple = (128, 128, 128)
    steps: int = 4000
    batch: int = 256
    lr: float = 2e-3


@dataclass
class TrainSection:
    epochs: int = 40
    lr: float = 0.02
    momentum: float = 0.9
    batch: int = 64


@dataclass
class EvalConfig:
    tpr: float = 0.95
    scores: tuple = ("msp", "energy", "mahalanobis", "maxcos")
    temperature: float = 1.0


@dataclass
class PathsConfig:
    data: str = "data"
    out: str = "runs"


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    oe: OeConfig = field(default_factory=OeConfig)
    ddpm: DdpmConfig = field(default_factory=DdpmConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_text(self) -> str:
        return dump(self)

    def replace(self, **overrides) -> "ExperimentConfig":
        return parse_items(dump_items(self) | {k: _fmt(v) for k, v in overrides.items()})


_ALIASES = {"oe.lambda": "oe.lam"}
_REVERSE = {v: k for k, v in _ALIASES.items()}
_INT_TUPLES = {"model.hidden", "ddpm.hidden"}


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key, typ, text: str):
    text = text.strip()
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        if text.lower() in ("auto", "none", ""):
            return None
        typ = next(t for t in typing.get_args(typ) if t is not type(None))
    try:
        if typ is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is tuple:
            parts = tuple(p.strip() for p in text.split(",") if p.strip())
            return tuple(int(p) for p in parts) if key in _INT_TUPLES else parts
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(typ, '__name__', typ)}") from None


def dump_items(cfg: ExperimentConfig) -> dict[str, str]:
    items = {"seed": _fmt(cfg.seed)}
    for sec in dataclasses.fields(cfg):
        if sec.name == "seed":
            continue
        obj = getattr(cfg, sec.name)
        for f in dataclasses.fields(obj):
            key = f"{sec.name}.{f.name}"
            items[_REVERSE.get(key, key)] = _fmt(getattr(obj, f.name))
    return items


def dump(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in dump_items(cfg).items())


def parse_items(items: dict[str, str]) -> ExperimentConfig:
    """Build a config from ``{"section.key": "text"}``; unknown keys are rejected."""
    cfg = ExperimentConfig()
    hints = typing.get_type_hints(ExperimentConfig)
    for raw_key, text in items.items():
        key = _ALIASES.get(raw_key, raw_key)
        if key == "seed":
            cfg.seed = _parse_value(key, int, text)
            continue
        section, _, name = key.partition(".")
        if section not in hints or section == "seed" or not name:
            raise ConfigError(f"unknown config key {raw_key!r}")
        obj = getattr(cfg, section)
        sec_hints = typing.get_type_hints(type(obj))
        if name not in sec_hints:
            raise ConfigError(f"unknown config key {raw_key!r}")
        setattr(obj, name, _parse_value(key, sec_hints[name], text))
    validate(cfg)
    return cfg


def parse_text(text: str) -> dict[str, str]:
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        k, v = line.split("=", 1)
        items[k.strip()] = v.strip()
    return items


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read a config file (optional) and apply ``key=value`` overrides on top."""
    items = {}
    if path:
        try:
            with open(path) as fh:
                items.update(parse_text(fh.read()))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not key=value")
        k, v = ov.split("=", 1)
        items[k.strip()] = v.strip()
    return parse_items(items)


def validate(cfg: ExperimentConfig) -> None:
    from .losses import KINDS
    from .scores import SCORE_KINDS
    if cfg.loss.kind not in KINDS:
        raise ConfigError(f"loss.kind must be one of {', '.join(KINDS)}")
    bad = [s for s in cfg.eval.scores if s not in SCORE_KINDS]
    if bad:
        raise ConfigError(f"unknown score kinds {bad}")
    if cfg.data.n_classes < 2:
        raise ConfigError("data.n_classes must be at least 2")
    if cfg.data.dims < 2:
        raise ConfigError("data.dims must be at least 2")
    if not 0 < cfg.eval.tpr < 1:
        raise ConfigError("eval.tpr must lie in (0, 1)")
    if cfg.oe.lam < 0:
        raise ConfigError("oe.lambda must be non-negative")
    if cfg.eval.temperature <= 0:
        raise ConfigError("eval.temperature must be positive")
    if cfg.train.lr <= 0 or cfg.ddpm.lr <= 0:
        raise ConfigError("learning rates must be positive")


def class_pairs(cfg: ExperimentConfig):
    C = cfg.data.n_classes
    if cfg.oe.pairs == "all":
        return [(a, b) for a in range(C) for b in range(a + 1, C)]
    pairs = []
    for chunk in cfg.oe.pairs.split(";"):
        a, b = (int(x) for x in chunk.split("-"))
        if a == b or not (0 <= a < C and 0 <= b < C):
            raise ConfigError(f"bad class pair {chunk!r}")
        pairs.append((a, b))
    return pairs
