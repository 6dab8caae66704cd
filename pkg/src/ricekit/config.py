"""Run configuration: one INI-style file with sections per subsystem.

Every key has a default; an empty (or absent) config file yields the
documented desk-scale defaults. The CLI help text and the drift test are
both generated from the same schema, so documentation cannot fall out of
sync with the dataclasses.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Optional

from .augment import AugmentConfig
from .errors import ConfigError
from .occlusion import OcclusionConfig
from .phantom import PhantomConfig
from .train import TrainConfig


@dataclass
class CohortCounts:
    n_train_recurrence: int = 48
    n_train_rice: int = 32
    n_test_recurrence: int = 7
    n_test_rice: int = 5


@dataclass
class PreprocessConfig:
    target_spacing_mm: float = 1.0
    crop_shape: tuple[int, int, int] = (64, 64, 64)
    normalize_mode: str = "masked"
    dose_ref_gy: float = 80.0


@dataclass
class ModelConfig:
    base_width: int = 8
    stem_kernel: int = 7


@dataclass
class RunSection:
    seed: int = 0
    workdir: str = "runs/default"
    workers: int = 1


# Section name -> dataclass type. Seeds inside phantom/train configs are
# driven by the global run seed and deliberately not exposed as keys.
SECTIONS = {
    "run": RunSection,
    "cohort": CohortCounts,
    "phantom": PhantomConfig,
    "preprocess": PreprocessConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "augment": AugmentConfig,
    "occlusion": OcclusionConfig,
}
_HIDDEN_KEYS = {("phantom", "seed"), ("train", "seed")}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    cohort: CohortCounts = field(default_factory=CohortCounts)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    occlusion: OcclusionConfig = field(default_factory=OcclusionConfig)

    def apply_seed(self) -> None:
        self.phantom.seed = self.run.seed
        self.train.seed = self.run.seed


def _parse_value(section: str, key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int) and not isinstance(default, bool):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = raw.replace(",", " ").split()
            if len(parts) != len(default):
                raise ValueError(f"expected {len(default)} values, got {len(parts)}")
            return tuple(type(d)(p) for d, p in zip(default, parts))
        if isinstance(default, str):
            # union-typed keys (e.g. occlusion target/channels) accept ints
            try:
                return int(raw)
            except ValueError:
                return raw
        raise ValueError(f"unsupported config type {type(default).__name__}")
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def schema() -> dict[str, dict[str, Any]]:
    """section -> {key: default} for every exposed configuration key."""
    out: dict[str, dict[str, Any]] = {}
    for section, cls in SECTIONS.items():
        defaults = cls()
        out[section] = {
            f.name: getattr(defaults, f.name)
            for f in dataclasses.fields(cls)
            if (section, f.name) not in _HIDDEN_KEYS
        }
    return out


def schema_help() -> str:
    lines = ["configuration keys (INI sections; every key optional):"]
    for section, keys in schema().items():
        lines.append(f"  [{section}]")
        for key, default in keys.items():
            shown = " ".join(str(v) for v in default) if isinstance(default, tuple) else default
            lines.append(f"    {key} = {shown}")
    return "\n".join(lines)


def load_run_config(path: Optional[str] = None,
                    seed: Optional[int] = None,
                    workdir: Optional[str] = None,
                    workers: Optional[int] = None) -> RunConfig:
    """Parse a config file (all keys optional) and apply CLI overrides."""
    cfg = RunConfig()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"unparseable config {path}: {exc}") from exc
        known = schema()
        for section in parser.sections():
            if section not in known:
                raise ConfigError(f"unknown config section [{section}] "
                                  f"(known: {', '.join(known)})")
            target = getattr(cfg, section)
            for key, raw in parser.items(section):
                if key not in known[section]:
                    raise ConfigError(f"unknown key '{key}' in [{section}] "
                                      f"(known: {', '.join(known[section])})")
                setattr(target, key, _parse_value(section, key, raw, known[section][key]))
    if seed is not None:
        cfg.run.seed = int(seed)
    if workdir is not None:
        cfg.run.workdir = str(workdir)
    if workers is not None:
        cfg.run.workers = int(workers)
    cfg.apply_seed()
    try:
        cfg.phantom.validate()
        cfg.train.validate()
        cfg.augment.validate()
        cfg.occlusion.validate()
        if cfg.preprocess.normalize_mode not in ("masked", "zscore_all"):
            raise ValueError(f"normalize_mode must be 'masked' or 'zscore_all', "
                             f"got {cfg.preprocess.normalize_mode!r}")
        if cfg.preprocess.dose_ref_gy <= 0:
            raise ValueError("dose_ref_gy must be positive")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg
