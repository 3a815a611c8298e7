"""Run configuration: named presets plus TOML/JSON overrides."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import tomli

from .encoder import EncoderConfig
from .errors import ConfigError, ParameterError
from .mccl import MCCLConfig
from .ptd import PTDConfig
from .trainer import TrainConfig

SECTIONS = {
    "train": TrainConfig,
    "encoder": EncoderConfig,
    "ptd": PTDConfig,
    "mccl": MCCLConfig,
}

# every constant here is the value reported for the full-scale setup
PAPER = {
    "train": {"lambda1": 0.8, "lambda2": 0.2, "lr_peak": 2e-5, "epochs": 2,
              "batch_size": 128, "warmup_frac": 0.10},
    "encoder": {"max_len": 128},
    "ptd": {"ratio": 0.10, "epsilon": 5e-9, "alpha": 5.0},
    "mccl": {"m_initial": 0.9996, "temperature_sim": 0.05, "temperature_va": 0.05},
}

DESK = {
    "train": {**PAPER["train"], "lr_peak": 1e-3, "batch_size": 16},
    "encoder": {"max_len": 32},
    "ptd": dict(PAPER["ptd"]),
    "mccl": dict(PAPER["mccl"]),
}

SMOKE = {
    "train": {**DESK["train"], "epochs": 10, "lr_peak": 3e-3},
    "encoder": {"max_len": 32},
    "ptd": {**DESK["ptd"], "epsilon": 0.5, "alpha": 0.25},
    "mccl": {**DESK["mccl"], "m_initial": 0.99},
}

PRESETS = {"paper": PAPER, "desk": DESK, "smoke": SMOKE}

TOP_LEVEL_KEYS = {"preset", "corpus", "eval_corpus", "scale", "out_dir"}


@dataclass
class RunConfig:
    preset: str = "desk"
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ptd: PTDConfig = field(default_factory=PTDConfig)
    mccl: MCCLConfig = field(default_factory=MCCLConfig)
    corpus: str | None = None
    eval_corpus: str | None = None
    scale: tuple[float, float] = (-1.0, 1.0)
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"preset": self.preset, "corpus": self.corpus,
                               "eval_corpus": self.eval_corpus, "scale": list(self.scale),
                               "out_dir": self.out_dir}
        for name in SECTIONS:
            section = getattr(self, name)
            out[name] = {f.name: getattr(section, f.name) for f in fields(section)}
        return out


def _build_section(name: str, values: dict) -> Any:
    cls = SECTIONS[name]
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (ParameterError, TypeError) as exc:
        raise ConfigError(f"invalid [{name}] settings: {exc}") from exc


def build_config(preset: str = "desk", overrides: dict | None = None) -> RunConfig:
    """Start from ``preset`` and apply ``overrides`` (same layout as a config file)."""
    overrides = dict(overrides or {})
    preset = overrides.pop("preset", preset)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    base = PRESETS[preset]
    sections = {}
    for name in SECTIONS:
        values = dict(base.get(name, {}))
        extra = overrides.pop(name, {}) or {}
        if not isinstance(extra, dict):
            raise ConfigError(f"[{name}] must be a table")
        values.update(extra)
        sections[name] = _build_section(name, values)
    unknown = set(overrides) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    scale = overrides.get("scale", (-1.0, 1.0))
    if len(scale) != 2:
        raise ConfigError("scale must be a [lo, hi] pair")
    return RunConfig(preset=preset, corpus=overrides.get("corpus"),
                     eval_corpus=overrides.get("eval_corpus"),
                     scale=(float(scale[0]), float(scale[1])),
                     out_dir=overrides.get("out_dir", "runs"), **sections)


def load_config(path: str | Path, preset: str | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix == ".json":
            data = json.loads(raw.decode("utf-8"))
        else:
            data = tomli.loads(raw.decode("utf-8"))
    except (json.JSONDecodeError, tomli.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if preset is not None:
        data["preset"] = preset
    cfg = build_config(data.get("preset", "desk"), data)
    base = path.parent
    # relative corpus paths resolve against the config file
    if cfg.corpus and not Path(cfg.corpus).is_absolute():
        cfg.corpus = str(base / cfg.corpus)
    if cfg.eval_corpus and not Path(cfg.eval_corpus).is_absolute():
        cfg.eval_corpus = str(base / cfg.eval_corpus)
    return cfg


def with_overrides(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Copy of ``cfg`` with keys replaced inside one section."""
    current = getattr(cfg, section)
    try:
        new = replace(current, **values)
    except (ParameterError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return replace(cfg, **{section: new})
