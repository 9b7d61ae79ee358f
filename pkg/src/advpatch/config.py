"""JSON experiment configuration.

Sections (all optional)::

    {
      "model": {"arch": {...ArchSpec...}, "seed": 0},
      "train": {...TrainConfig..., "mode": "adversarial",
                "augment": {"padding": 2, "flip": true, "contrast": [0.8, 1.2]},
                "attack": {"preset": "ap-fulllo", "iterations": 10, ...}},
      "attack": [{"preset": "ap-fulllo", "iterations": 25, "restarts": 3, ...}, ...],
      "eval": {"suite": "default", "attack_all": false},
      "data": {"train": "train.aptd", "test": "test.aptd", "synth": {...SynthSpec...}}
    }

An attack entry may name a ``preset``; its remaining keys override the preset.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .attack import PRESETS, AttackConfig, preset
from .data_io import SynthSpec
from .errors import ConfigError
from .model import ArchSpec, TrainConfig
from .training import AugConfig, TrainMode

SECTIONS = ("model", "train", "attack", "eval", "data")


def _check_keys(section: str, d: dict, allowed) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")


def _names(cls) -> set:
    return {f.name for f in fields(cls)}


def attack_from_dict(d: dict, **defaults) -> AttackConfig:
    d = dict(d)
    name = d.pop("preset", None)
    _check_keys("attack", d, _names(AttackConfig))
    merged = {**defaults, **d}
    try:
        return preset(name, **merged) if name else AttackConfig(**merged)
    except TypeError as e:
        raise ConfigError(str(e)) from None


@dataclass
class ExperimentConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    attack: list = field(default_factory=list)
    eval: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_keys("model", self.model, {"arch", "seed"})
        _check_keys("train", self.train, _names(TrainConfig) | {"mode", "augment", "attack"})
        _check_keys("eval", self.eval, {"suite", "attack_all", "seed"})
        _check_keys("data", self.data, {"train", "test", "synth"})
        if isinstance(self.attack, dict):
            self.attack = [self.attack]
        if not isinstance(self.attack, list):
            raise ConfigError("config section 'attack' must be a list of attack configs")
        # validate eagerly so bad configs fail before any work starts
        self.arch()
        self.train_config()
        self.train_mode()
        self.augment()
        self.attack_suite()
        self.synth_spec()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _check_keys("config", d, SECTIONS)
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def arch(self) -> ArchSpec | None:
        a = self.model.get("arch")
        return None if a is None else ArchSpec.from_dict(a)

    def train_config(self, **overrides) -> TrainConfig:
        d = {k: v for k, v in self.train.items() if k in _names(TrainConfig)}
        return TrainConfig(**{**d, **overrides})

    def train_mode(self, kind: str | None = None) -> TrainMode:
        kind = kind or self.train.get("mode", "normal")
        spec = self.train.get("attack")
        return TrainMode(kind, attack_from_dict(spec)) if spec else TrainMode(kind)

    def augment(self) -> AugConfig:
        d = dict(self.train.get("augment", {}))
        _check_keys("train.augment", d, _names(AugConfig))
        if "contrast" in d:
            d["contrast"] = tuple(d["contrast"])
        return AugConfig(**d)

    def attack_suite(self) -> list[AttackConfig]:
        return [attack_from_dict(a) for a in self.attack]

    def synth_spec(self, **overrides) -> SynthSpec:
        d = dict(self.data.get("synth", {}))
        _check_keys("data.synth", d, _names(SynthSpec))
        if "families" in d:
            d["families"] = tuple(d["families"])
        return SynthSpec(**{**d, **overrides})


SUITE_NAMES = ("default", "heatmap", *sorted(PRESETS))
