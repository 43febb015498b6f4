"""Run configuration and its flat ``section.key = value`` text format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .data import GeneratorConfig
from .errors import ConfigError
from .model import ModelConfig


@dataclass
class OptimConfig:
    lr: float = 0.032
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 40

    def validate(self) -> None:
        if self.lr <= 0 or self.epochs < 1:
            raise ConfigError("optim.lr must be > 0 and optim.epochs >= 1")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("optim.momentum must lie in [0, 1) and optim.weight_decay >= 0")


@dataclass
class SamplerConfig:
    p: int = 16
    k: int = 4


@dataclass
class EvalConfig:
    normalize: bool = True
    max_negatives: int = 5000


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    data_seed: int = 0
    identity_fraction: float = 1.0
    flip_prob: float = 0.5
    use_id_loss: bool = True
    use_triplet_loss: bool = True
    out: str = "runs/default"

    def validate(self) -> None:
        self.model.validate()
        self.data.validate()
        self.optim.validate()
        if (self.model.image_height, self.model.image_width, self.model.num_channels) != (
            self.data.image_height, self.data.image_width, self.data.num_channels
        ):
            raise ConfigError("model and data image geometry differ")
        if not 0.0 < self.identity_fraction <= 1.0:
            raise ConfigError("data.identity_fraction must lie in (0, 1]")


# flat key -> (section attribute or None, field name)
_SECTIONS = {"model": "model", "data": "data", "optim": "optim", "sampler": "sampler",
             "eval": "eval"}
# a few keys read better under another section than where the dataclass keeps them
_ALIASES = {
    "loss.lambda": ("model", "sdc_lambda"),
    "loss.dwc": ("model", "dwc_enabled"),
    "loss.dwc_detach": ("model", "dwc_detach"),
    "loss.label_smoothing": ("model", "label_smoothing"),
    "loss.triplet_distance": ("model", "triplet_distance"),
    "loss.use_id": (None, "use_id_loss"),
    "loss.use_triplet": (None, "use_triplet_loss"),
    "data.seed": (None, "data_seed"),
    "data.identity_fraction": (None, "identity_fraction"),
    "data.flip_prob": (None, "flip_prob"),
    "model.dropout": ("model", "dropout"),
}
# derived from the data section, not user-settable
_DERIVED = {("model", "num_classes"), ("model", "image_height"), ("model", "image_width"),
            ("model", "num_channels"), ("model", "sdc_lambda"), ("model", "dwc_enabled"),
            ("model", "dwc_detach"), ("model", "label_smoothing"),
            ("model", "triplet_distance")}


def _coerce(value: str, like: Any, key: str):
    try:
        if isinstance(like, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type(like).__name__}") from None


def known_keys() -> dict[str, tuple]:
    keys = {}
    default = RunConfig()
    for sec in _SECTIONS:
        for f in fields(getattr(default, sec)):
            if (sec, f.name) not in _DERIVED:
                keys[f"{sec}.{f.name}"] = (sec, f.name)
    for f in fields(RunConfig):
        if f.name not in _SECTIONS and f.name not in ("data_seed", "identity_fraction",
                                                      "flip_prob", "use_id_loss",
                                                      "use_triplet_loss"):
            keys[f.name] = (None, f.name)
    keys.update(_ALIASES)
    return keys


def apply_overrides(cfg: RunConfig, values: dict[str, str]) -> RunConfig:
    """Return a copy of ``cfg`` with flat-key string overrides applied."""
    keys = known_keys()
    sections = {s: replace(getattr(cfg, s)) for s in _SECTIONS}
    top = {}
    for key, raw in values.items():
        if key not in keys:
            raise ConfigError(f"unknown config key: {key}")
        sec, name = keys[key]
        target = sections[sec] if sec else cfg
        val = _coerce(raw, getattr(target, name), key)
        if sec:
            object.__setattr__(sections[sec], name, val)
        else:
            top[name] = val
    d = sections["data"]
    m = sections["model"]
    m.image_height, m.image_width, m.num_channels = d.image_height, d.image_width, d.num_channels
    out = replace(cfg, **sections, **top)
    out.model.num_classes = max(2, math.ceil(out.identity_fraction * d.num_identities))
    out.validate()
    return out


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in values:
            raise ConfigError(f"line {n}: duplicate key {k}")
        values[k] = v
    return values


def load_config(path) -> RunConfig:
    return apply_overrides(RunConfig(), parse_config_text(Path(path).read_text(encoding="utf-8")))


def to_flat(cfg: RunConfig) -> dict[str, str]:
    out = {}
    for key, (sec, name) in sorted(known_keys().items()):
        target = getattr(cfg, sec) if sec else cfg
        val = getattr(target, name)
        out[key] = repr(val) if isinstance(val, float) else str(val).lower() if isinstance(val, bool) else str(val)
    return out


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_flat(cfg).items())


def default_config(**overrides) -> RunConfig:
    """Defaults plus flat-key overrides given as keyword args (dots -> '__')."""
    return apply_overrides(RunConfig(), {k.replace("__", "."): str(v) for k, v in overrides.items()})
