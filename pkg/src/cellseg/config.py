"""Strict JSON run configuration.

Unknown keys are rejected (every offending key listed), required keys are
named when missing, and parsing materialises every default so the effective
document round-trips to a fully specified config that is stored alongside
the run artifacts.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .data import DataError, Dataset, SyntheticSpec, load_dataset, load_pets, \
    synthetic_dataset
from .model import ArchConfig, ConfigError
from .training import ScheduleError, TrainConfig, UnrollSchedule

OUTPUT_ROOT_ENV = "CELLSEG_OUT_ROOT"


class RunConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


@dataclass
class DatasetConfig:
    kind: str = "synthetic"            # synthetic | pets | cache
    resolution: int = 48
    train_count: int = 64
    eval_count: int = 16
    seed: int = 100
    boundary_thickness: int = 2
    noise_sigma: float = 0.03
    root: Optional[str] = None         # pets root / cache directory

    def load(self) -> tuple[Dataset, Dataset]:
        if self.kind == "synthetic":
            train = synthetic_dataset(SyntheticSpec(
                resolution=self.resolution, count=self.train_count,
                seed=self.seed, boundary_thickness=self.boundary_thickness,
                noise_sigma=self.noise_sigma))
            evald = synthetic_dataset(SyntheticSpec(
                resolution=self.resolution, count=self.eval_count,
                seed=self.seed + 1, boundary_thickness=self.boundary_thickness,
                noise_sigma=self.noise_sigma))
            return train, evald
        if self.kind == "pets":
            if not self.root:
                raise DataError("pets dataset needs 'root'")
            return load_pets(self.root, self.resolution)
        if self.kind == "cache":
            if not self.root:
                raise DataError("cache dataset needs 'root'")
            ds = load_dataset(self.root)
            half = max(1, len(ds) - self.eval_count)
            return Dataset(ds.samples[:half]), Dataset(ds.samples[half:] or ds.samples[:1])
        raise DataError(f"unknown dataset kind {self.kind!r}")


@dataclass
class TrainSection:
    steps: int
    lr: float = 3e-4
    batch: int = 32
    pool_size: Optional[int] = None
    checkpoint_every: int = 0


@dataclass
class RunConfig:
    out_dir: str
    train: TrainSection
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    schedule: UnrollSchedule = field(default_factory=UnrollSchedule)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "dataset": dataclasses.asdict(self.dataset),
            "arch": dataclasses.asdict(self.arch),
            "schedule": dataclasses.asdict(self.schedule),
            "train": dataclasses.asdict(self.train),
        }

    def resolved_out_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        p = Path(self.out_dir)
        if root and not p.is_absolute():
            return Path(root) / p
        return p

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.train.steps, lr=self.train.lr, batch=self.train.batch,
            pool_size=self.train.pool_size, seed=self.seed,
            checkpoint_every=self.train.checkpoint_every,
            out_dir=str(self.resolved_out_dir()),
            arch=self.arch, schedule=self.schedule)


_SECTIONS = {
    "dataset": DatasetConfig,
    "arch": ArchConfig,
    "schedule": UnrollSchedule,
    "train": TrainSection,
}
_TOP_REQUIRED = ("out_dir",)
_TOP_SCALARS = ("seed", "out_dir")


def _dataclass_fields(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls)}


def parse_config(doc: Any) -> RunConfig:
    """Validate a JSON document into a RunConfig, collecting every problem."""
    problems: list[str] = []
    if not isinstance(doc, dict):
        raise RunConfigError(["top level must be a JSON object"])

    known_top = set(_TOP_SCALARS) | set(_SECTIONS)
    for key in sorted(set(doc) - known_top):
        problems.append(f"unknown key {key!r}")
    for key in _TOP_REQUIRED:
        if key not in doc:
            problems.append(f"missing required key {key!r}")

    sections: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        sub = doc.get(name, {})
        if not isinstance(sub, dict):
            problems.append(f"section {name!r} must be an object")
            continue
        fields = _dataclass_fields(cls)
        for key in sorted(set(sub) - set(fields)):
            problems.append(f"unknown key {name!r}.{key!r}")
        kwargs = {}
        for fname, f in fields.items():
            if fname in sub:
                kwargs[fname] = sub[fname]
            elif f.default is dataclasses.MISSING and \
                    f.default_factory is dataclasses.MISSING:
                problems.append(f"missing required key {name!r}.{fname!r}")
        if not problems:
            try:
                sections[name] = cls(**kwargs)
            except TypeError as e:
                problems.append(f"section {name!r}: {e}")

    if problems:
        raise RunConfigError(problems)

    cfg = RunConfig(
        seed=int(doc.get("seed", 0)),
        out_dir=str(doc["out_dir"]),
        dataset=sections["dataset"],
        arch=sections["arch"],
        schedule=sections["schedule"],
        train=sections["train"])
    try:
        cfg.arch.validate()
        cfg.schedule.validate()
        cfg.train_config().validate()
        if cfg.dataset.kind not in ("synthetic", "pets", "cache"):
            raise DataError(f"unknown dataset kind {cfg.dataset.kind!r}")
    except (ConfigError, ScheduleError, DataError) as e:
        raise RunConfigError([str(e)]) from e
    return cfg


def load_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise RunConfigError([f"not valid JSON: {e}"]) from e
    return parse_config(doc)


def save_effective_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
