"""Declarative run configuration: one YAML file, strict keys, full defaults.

Defaults reproduce the reference training settings where they are known:
1400 denoising steps, 20 sampler steps, EMA decay 0.995, learning rate
1e-4 annealed to 5e-7, batch of one sequence, and an 8x spatial factor.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import CellParams, MotionParams, SyntheticSpec
from .errors import ConfigError
from .nets import ArchConfig
from .schedule import SCHEDULE_KINDS

DATA_DIR_ENV = "PRECIPDIFF_DATA_DIR"


@dataclass(frozen=True)
class DataConfig:
    mode: str = "synthetic"
    ingest_dir: str | None = None
    n_train: int = 64
    n_eval: int = 8
    height: int = 48
    width: int = 48
    scale: int = 8
    channels: int = 3
    epsilon: float = 1e-4
    drift_speed: float = 2.0
    drift_jitter: float = 0.1
    spatial_variation: float = 0.2
    n_cells: int = 30
    cell_scale: float = 4.0
    cell_anisotropy: float = 2.5
    cell_intensity: float = 1.0
    orographic_amp: float = 1.5

    def __post_init__(self):
        if self.mode not in ("synthetic", "files"):
            raise ConfigError(f"data.mode must be 'synthetic' or 'files', got {self.mode!r}")
        if self.mode == "files" and not self.ingest_dir:
            raise ConfigError("data.mode='files' requires data.ingest_dir")
        if self.scale < 1 or self.height < 1 or self.width < 1:
            raise ConfigError("data.scale/height/width must be positive")

    def synthetic_spec(self, n_frames: int, seed: int) -> SyntheticSpec:
        return SyntheticSpec(
            n_frames=n_frames,
            height=self.height,
            width=self.width,
            scale=self.scale,
            channels=self.channels,
            seed=seed,
            epsilon=self.epsilon,
            motion=MotionParams(
                drift_speed=self.drift_speed,
                spatial_variation=self.spatial_variation,
                jitter=self.drift_jitter,
            ),
            cells=CellParams(
                n_cells=self.n_cells,
                scale=self.cell_scale,
                anisotropy=self.cell_anisotropy,
                intensity=self.cell_intensity,
                orographic_amp=self.orographic_amp,
            ),
        )


@dataclass(frozen=True)
class ScheduleConfig:
    n_steps: int = 1400
    kind: str = "cosine"
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if not isinstance(self.n_steps, int) or self.n_steps < 1:
            raise ConfigError(f"schedule.n_steps must be a positive integer, got {self.n_steps!r}")
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"schedule.kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    frames: int = 8
    lr: float = 1e-4
    lr_final: float = 5e-7
    batch_size: int = 1
    ema_decay: float = 0.995
    seed: int = 0
    w_diff: float = 1.0
    w_flow: float = 1.0
    w_swin: float = 1.0
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"train.steps must be positive, got {self.steps!r}")
        if self.frames < 2:
            raise ConfigError(f"train.frames must be at least 2, got {self.frames!r}")
        if self.batch_size != 1:
            raise ConfigError("train.batch_size is fixed at one sequence per step")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"train.ema_decay must lie in [0, 1), got {self.ema_decay!r}")
        if self.lr <= 0 or self.lr_final <= 0 or self.lr_final > self.lr:
            raise ConfigError(
                f"train.lr={self.lr!r} must be positive and >= train.lr_final={self.lr_final!r}"
            )


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 20
    members: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"sample.steps must be positive, got {self.steps!r}")
        if self.members < 1:
            raise ConfigError(f"sample.members must be positive, got {self.members!r}")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    ablation: str = "full"

    def __post_init__(self):
        if self.ablation not in ("full", "no_flow", "single_channel"):
            raise ConfigError(f"unknown ablation mode {self.ablation!r}")
        if self.schedule.n_steps < self.sample.steps:
            raise ConfigError(
                f"sample.steps={self.sample.steps} exceeds schedule.n_steps={self.schedule.n_steps}"
            )

    @property
    def in_channels(self) -> int:
        return 1 if self.ablation == "single_channel" else self.data.channels


def _coerce(section: str, name: str, annotation, value):
    if annotation in ("int", int) and isinstance(value, bool):
        raise ConfigError(f"{section}.{name}: expected an integer, got {value!r}")
    if annotation in ("float", float) and isinstance(value, int):
        return float(value)
    return value


def _from_mapping(cls, mapping, section: str):
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"config section {section!r} must be a mapping, got {type(mapping).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(mapping) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key {section}.{sorted(unknown)[0]}")
    kwargs = {}
    for name, value in mapping.items():
        kwargs[name] = _coerce(section, name, known[name].type, value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in section {section!r}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    """Strictly parse a nested mapping into a RunConfig; unknown keys fail."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    sections = {"data": DataConfig, "arch": ArchConfig, "schedule": ScheduleConfig,
                "train": TrainConfig, "sample": SampleConfig}
    unknown = set(raw) - set(sections) - {"ablation"}
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]}")
    parsed = {name: _from_mapping(cls, raw.get(name), name) for name, cls in sections.items()}
    return RunConfig(ablation=raw.get("ablation", "full"), **parsed)


def load_config(path: str | Path | None) -> RunConfig:
    """RunConfig from a YAML file (or pure defaults when no path is given).

    The data-directory environment variable, when set, overrides
    ``data.ingest_dir`` and switches the data mode to file ingestion.
    """
    raw = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    cfg = config_from_dict(raw)
    env_dir = os.environ.get(DATA_DIR_ENV)
    if env_dir:
        cfg = dataclasses.replace(
            cfg, data=dataclasses.replace(cfg.data, mode="files", ingest_dir=env_dir)
        )
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: RunConfig) -> str:
    """Stable short fingerprint of a fully resolved config."""
    canon = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
