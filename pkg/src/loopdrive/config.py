"""Run configuration: defaults, YAML files, env and CLI overrides.

Precedence, lowest to highest: dataclass defaults, config file, environment
variables (``LOOPDRIVE_<SECTION>__<FIELD>``), command-line overrides. The
effective config is echoed into every run directory so any run is
reproducible from that file alone.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields

import yaml

from .evaluation import EvalConfig
from .policy import PolicyConfig
from .synth import GenConfig
from .training import TrainConfig

ENV_PREFIX = "LOOPDRIVE_"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    test_fraction: float = 0.2

    def to_dict(self) -> dict:
        return {
            "gen": dataclasses.asdict(self.gen),
            "policy": dataclasses.asdict(self.policy),
            "train": dataclasses.asdict(self.train),
            "eval": dataclasses.asdict(self.eval),
            "test_fraction": self.test_fraction,
        }


_SECTIONS = {"gen": "gen", "policy": "policy", "train": "train", "eval": "eval"}


def _coerce(current, value):
    """Cast a parsed YAML value onto the type of the field's current value."""
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(value)
    if isinstance(current, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"expected a mapping, got {value!r}")
        return dict(value)
    return value


def set_option(cfg: RunConfig, dotted: str, raw_value) -> None:
    """Set ``section.field`` from a raw (string or YAML-typed) value."""
    if "." not in dotted:
        if dotted == "test_fraction":
            cfg.test_fraction = float(raw_value if not isinstance(raw_value, str)
                                      else yaml.safe_load(raw_value))
            return
        raise ConfigError(f"unknown option {dotted!r}")
    section_name, field_name = dotted.split(".", 1)
    if section_name not in _SECTIONS:
        raise ConfigError(f"unknown config section {section_name!r}")
    section = getattr(cfg, section_name)
    if not hasattr(section, field_name):
        raise ConfigError(f"unknown option {dotted!r}")
    value = yaml.safe_load(raw_value) if isinstance(raw_value, str) else raw_value
    setattr(section, field_name, _coerce(getattr(section, field_name), value))


def load_config(path: str | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        for section_name, content in data.items():
            if section_name == "test_fraction":
                cfg.test_fraction = float(content)
                continue
            if section_name not in _SECTIONS:
                raise ConfigError(f"{path}: unknown section {section_name!r}")
            if not isinstance(content, dict):
                raise ConfigError(f"{path}: section {section_name!r} must be a mapping")
            for key, value in content.items():
                set_option(cfg, f"{section_name}.{key}", value)
    _apply_env(cfg)
    return cfg


def _apply_env(cfg: RunConfig) -> None:
    for name, value in sorted(os.environ.items()):
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        body = name[len(ENV_PREFIX):]
        section, key = body.split("__", 1)
        dotted = f"{section.lower()}.{key.lower()}"
        try:
            set_option(cfg, dotted, value)
        except ConfigError:
            raise ConfigError(f"environment override {name} failed: unknown {dotted}")


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
