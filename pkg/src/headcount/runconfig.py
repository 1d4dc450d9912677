"""Structured run configuration: one JSON file drives every CLI command.

Unknown keys are rejected with their dotted path; individual keys can be
overridden from the command line; every command writes the fully resolved
config next to its outputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .costmodel import CostProfile, load_profile, reference_profile
from .datasynth import DatasetConfig
from .searcher import SearchConstraints
from .space import SearchSpace, default_search_space


@dataclass
class SpaceSection:
    preset: str = "default"
    stages: list | None = None  # StageSpec dicts when preset == "custom"


@dataclass
class DataSection:
    dir: str = "data"
    sample_rate: int = 16000
    segment_seconds: float = 5.0
    train_per_class: int = 1000
    val_per_class: int = 100
    test_per_class: int = 300
    train_speakers: int = 40
    test_speakers: int = 16
    source_dir: str | None = None


@dataclass
class TrainSection:
    epochs: int = 8
    batch_size: int = 16
    lr: float = 0.003
    optimizer: str = "masked_adam"
    lr_decay_fraction: float = 0.75
    sample_max_every: int = 0


@dataclass
class TeacherSection:
    epochs: int = 6
    batch_size: int = 16
    lr: float = 0.001
    optimizer: str = "adam"


@dataclass
class KdSection:
    enabled: bool = True
    tau: float | None = None
    temperature: float = 4.0
    alpha: float = 0.5
    teacher_checkpoint: str | None = None  # <output_dir>/teacher.ckpt when unset


@dataclass
class CostSection:
    profile: str | None = None  # bundled reference profile when unset
    theta: float = 0.35
    input_len: int = 0          # 0: derive from the data section
    segment_seconds: float = 0.0  # 0: derive from the data section
    active_hours: float = 12.0


@dataclass
class SearchSection:
    mode: str = "evolutionary"
    population: int = 64
    generations: int = 30
    mutation: float = 0.1
    crossover: float = 0.5
    tournament: int = 4
    max_latency_ms: float = 5000.0
    max_daily_energy_mwh: float = 8400.0  # 700 mW * 12 h
    val_subset: int = 0  # 0: whole validation split
    random_probes: int = 256
    exhaustive_cap: int = 10000


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/out"
    space: SpaceSection = field(default_factory=SpaceSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    kd: KdSection = field(default_factory=KdSection)
    cost: CostSection = field(default_factory=CostSection)
    search: SearchSection = field(default_factory=SearchSection)

    def build_space(self) -> SearchSpace:
        if self.space.preset == "default":
            return default_search_space()
        if self.space.preset == "custom":
            if not self.space.stages:
                raise ValueError("space.preset 'custom' requires space.stages")
            return SearchSpace.from_dict({"stages": self.space.stages})
        raise ValueError(f"unknown space preset {self.space.preset!r}")

    def dataset_config(self) -> DatasetConfig:
        d = self.data
        return DatasetConfig(
            out_dir=d.dir, seed=self.seed, sample_rate=d.sample_rate,
            segment_seconds=d.segment_seconds, train_per_class=d.train_per_class,
            val_per_class=d.val_per_class, test_per_class=d.test_per_class,
            train_speakers=d.train_speakers, test_speakers=d.test_speakers,
            source_dir=d.source_dir)

    def cost_input_len(self) -> int:
        if self.cost.input_len > 0:
            return self.cost.input_len
        return int(round(self.data.sample_rate * self.data.segment_seconds))

    def cost_segment_seconds(self) -> float:
        return self.cost.segment_seconds or self.data.segment_seconds

    def load_cost_profile(self) -> CostProfile:
        if self.cost.profile:
            return load_profile(self.cost.profile)
        return reference_profile()

    def constraints(self) -> SearchConstraints:
        return SearchConstraints(
            max_latency_ms=self.search.max_latency_ms,
            max_daily_energy_mwh=self.search.max_daily_energy_mwh,
            bottleneck_theta=self.cost.theta)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _build_section(cls, data: dict, path: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ValueError(f"unknown config key {path}{key!r}")
        kwargs[key] = value
    return cls(**kwargs)


def run_config_from_dict(data: dict) -> RunConfig:
    sections = {f.name: f for f in dataclasses.fields(RunConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in sections:
            raise ValueError(f"unknown config key {key!r}")
        default = sections[key].default_factory if sections[key].default_factory \
            is not dataclasses.MISSING else None
        if default is not None:
            if not isinstance(value, dict):
                raise ValueError(f"config key {key!r} must be an object")
            kwargs[key] = _build_section(type(default()), value, f"{key}.")
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config {path}: invalid JSON ({exc})") from None
    return run_config_from_dict(data)


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply 'section.key=value' strings on top of a loaded config."""
    data = cfg.to_dict()
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ValueError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return run_config_from_dict(data)


def write_resolved_config(cfg: RunConfig, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
