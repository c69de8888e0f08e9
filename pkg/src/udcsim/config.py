"""Declarative experiment configuration (YAML).

Sections: ``data``, ``sgm``, ``generator``, ``discriminator``, ``restorer`` and
``schedule`` (with ``gan``, ``restorer`` and ``pretrain`` subsections). Every
key is optional; missing keys take the desk-scale defaults below.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .discriminator import DiscriminatorConfig
from .dwformer import RestorerConfig
from .errors import ConfigError
from .generator import GeneratorConfig
from .sgm import SgmConfig
from .training import GanTrainConfig, RestoreTrainConfig

SECTIONS = ("data", "sgm", "generator", "discriminator", "restorer", "schedule", "probes")


@dataclass
class DataConfig:
    clean_dir: Optional[str] = None  # None: procedural scenes
    n_images: int = 120
    height: int = 96
    width: int = 96
    split: tuple = (0.8, 0.1, 0.1)

    def validate(self):
        self.split = tuple(float(s) for s in self.split)
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError("data.split needs three non-negative fractions summing to 1")
        if min(self.n_images, self.height, self.width) <= 0:
            raise ConfigError("data sizes must be positive")
        return self


@dataclass
class ProbeConfig:
    size: int = 64
    level: float = 0.5
    margin: int = 8  # border pixels excluded from flat-probe statistics
    draws: int = 8

    def validate(self):
        if self.size <= 2 * self.margin or not 0.0 < self.level < 1.0 or self.draws < 1:
            raise ConfigError("probe size must exceed twice the margin, level in (0, 1), draws >= 1")
        return self


def desk_restorer() -> RestorerConfig:
    return RestorerConfig(widths=(16, 32, 48, 32, 16), blocks=(1, 1, 1, 1, 1))


def desk_schedule() -> dict:
    return {
        "gan": GanTrainConfig(total_iters=800, lr_g=2e-4, lr_g_min=2e-6, lr_d=2e-4, lr_d_min=2e-6, batch=4,
                              patch=64, checkpoint_fraction=0.0),
        "restorer": RestoreTrainConfig(total_iters=400, lr=2e-3, lr_min=1e-5, batch=8, patch=64,
                                       checkpoint_fraction=0.0),
        "pretrain": RestoreTrainConfig(total_iters=400, lr=2e-3, lr_min=1e-5, batch=8, patch=64,
                                       checkpoint_fraction=0.0),
    }


def _sgm_default():
    return SgmConfig.from_dict({"preset": "poled"})


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    sgm: SgmConfig = field(default_factory=_sgm_default)
    generator: GeneratorConfig = field(default_factory=lambda: GeneratorConfig(blur_width=16))
    discriminator: DiscriminatorConfig = field(default_factory=lambda: DiscriminatorConfig(widths=(16, 32, 64)))
    restorer: RestorerConfig = field(default_factory=desk_restorer)
    schedule: dict = field(default_factory=desk_schedule)
    probes: ProbeConfig = field(default_factory=ProbeConfig)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls()
        try:
            if "data" in d:
                cfg.data = DataConfig(**d["data"])
            if "sgm" in d:
                cfg.sgm = SgmConfig.from_dict(d["sgm"])
            if "generator" in d:
                cfg.generator = GeneratorConfig.from_dict(d["generator"])
            if "discriminator" in d:
                cfg.discriminator = DiscriminatorConfig.from_dict(d["discriminator"])
            if "restorer" in d:
                cfg.restorer = RestorerConfig.from_dict(d["restorer"])
            if "probes" in d:
                cfg.probes = ProbeConfig(**d["probes"])
            sched = dict(d.get("schedule") or {})
            bad = set(sched) - {"gan", "restorer", "pretrain"}
            if bad:
                raise ConfigError(f"unknown schedule subsections: {sorted(bad)}")
            for key, kind in (("gan", GanTrainConfig), ("restorer", RestoreTrainConfig),
                              ("pretrain", RestoreTrainConfig)):
                if key in sched:
                    merged = cfg.schedule[key].to_dict()
                    merged.update(sched[key])
                    cfg.schedule[key] = kind.from_dict(merged)
        except TypeError as e:  # unexpected keyword from a dataclass constructor
            raise ConfigError(str(e)) from e
        return cfg.validate()

    def validate(self):
        self.data.validate()
        self.generator.validate()
        self.discriminator.validate()
        self.restorer.validate()
        self.probes.validate()
        for v in self.schedule.values():
            v.validate()
        return self

    def to_dict(self) -> dict:
        return {
            "data": {**self.data.__dict__, "split": list(self.data.split)},
            "sgm": self.sgm.to_dict(),
            "generator": self.generator.to_dict(),
            "discriminator": self.discriminator.to_dict(),
            "restorer": self.restorer.to_dict(),
            "schedule": {k: v.to_dict() for k, v in self.schedule.items()},
            "probes": dict(self.probes.__dict__),
        }

    def config_hash(self) -> str:
        return config_hash(self.to_dict())

    def copy(self) -> "ExperimentConfig":
        return copy.deepcopy(self)


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(raw)


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)
