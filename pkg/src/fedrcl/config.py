"""Experiment configuration: YAML/JSON parsing, defaults, overrides, echo.

A config file is a mapping with the sections ``dataset``, ``partition``,
``model``, ``train``, ``loss`` and ``server`` plus the top-level keys
``seed`` and ``out``. Every key is optional except ``dataset.kind``;
missing keys take the library defaults. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .datasets import PartitionConfig
from .engine import ServerOptState, TrainConfig, derived_seed
from .errors import ConfigError
from .losses import LossConfig
from .model import ArchConfig

DATASET_KINDS = ("synthetic", "cifar10", "cifar100")
LOSS_ALIASES = {"ce": "ce", "scl": "ce+scl", "rcl": "ce+rcl", "prox": "ce+prox"}
WORKERS_ENV = "FEDRCL_WORKERS"


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    # synthetic blobs
    num_classes: int = 8
    per_class: int = 125
    test_per_class: int = 100
    dim: int = 32
    spread: float = 0.3
    # CIFAR binary files
    train_files: tuple[str, ...] = ()
    test_files: tuple[str, ...] = ()
    max_train: int | None = None
    max_test: int | None = None

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "train_files", _str_tuple(self.train_files))
        object.__setattr__(self, "test_files", _str_tuple(self.test_files))
        if self.kind != "synthetic" and not self.train_files:
            raise ConfigError(f"dataset.train_files is required for dataset.kind={self.kind!r}")

    @property
    def classes(self) -> int:
        return {"cifar10": 10, "cifar100": 100}.get(self.kind, self.num_classes)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (self.dim,) if self.kind == "synthetic" else (3, 32, 32)


def _str_tuple(v) -> tuple[str, ...]:
    if isinstance(v, (str, os.PathLike)):
        return (str(v),)
    return tuple(str(x) for x in v)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec
    partition: PartitionConfig
    model: ArchConfig
    train: TrainConfig
    loss: LossConfig
    server: ServerOptState = field(default_factory=ServerOptState)
    seed: int = 0
    out: str = "runs/default"

    def to_dict(self) -> dict:
        """Plain-data form; parsing it again yields an equal config."""
        ds = dataclasses.asdict(self.dataset)
        ds["train_files"] = list(self.dataset.train_files)
        ds["test_files"] = list(self.dataset.test_files)
        part = dataclasses.asdict(self.partition)
        part.pop("seed")
        model = {"widths": list(self.model.widths), "groups": self.model.groups,
                 "reduction": self.model.reduction, "num_classes": self.model.num_classes}
        train = dataclasses.asdict(self.train)
        train.pop("seed")
        return {
            "seed": self.seed,
            "out": self.out,
            "dataset": ds,
            "partition": part,
            "model": model,
            "train": train,
            "loss": self.loss.to_dict(),
            "server": self.server.hyperparams(),
        }


# Keys accepted per section, derived from the dataclasses they feed.
_DERIVED = {"partition": {"seed"}, "train": {"seed"}, "model": {"input_shape"}, "server": {"m", "v"}}
_SECTIONS = {
    "dataset": DatasetSpec,
    "partition": PartitionConfig,
    "model": ArchConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "server": ServerOptState,
}
_TOP_LEVEL = ("seed", "out", *_SECTIONS)


def valid_keys(section: str) -> list[str]:
    names = [f.name for f in dataclasses.fields(_SECTIONS[section])]
    return [n for n in names if n not in _DERIVED.get(section, ())]


def _check_keys(where: str, given, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}; valid keys: {sorted(allowed)}")


def _section(raw: dict, name: str) -> dict:
    data = raw.get(name) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    _check_keys(f"section {name!r}", data, valid_keys(name))
    return dict(data)


def from_dict(raw: dict) -> ExperimentConfig:
    """Build and cross-check a config from a nested mapping."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys("the config root", raw, _TOP_LEVEL)
    seed = int(raw.get("seed", 0))

    ds_raw = _section(raw, "dataset")
    if "kind" not in ds_raw:
        raise ConfigError("dataset.kind is required")
    dataset = DatasetSpec(**ds_raw)

    part = _section(raw, "partition")
    part.setdefault("scheme", "dirichlet")
    part.setdefault("num_clients", 10)
    if part["scheme"] == "dirichlet":
        part.setdefault("alpha", 0.1)
    elif part["scheme"] == "quantity":
        part.setdefault("gamma", 2)
    partition = PartitionConfig(**part, seed=derived_seed(seed, "partition"))

    model_raw = _section(raw, "model")
    q = model_raw.pop("num_classes", dataset.classes)
    if q != dataset.classes:
        raise ConfigError(f"model.num_classes={q} disagrees with dataset.num_classes={dataset.classes}")
    model_raw.setdefault("widths", (32, 32) if dataset.kind == "synthetic" else (16, 32))
    model = ArchConfig(input_shape=dataset.input_shape, num_classes=q, **model_raw)

    train = TrainConfig(**_section(raw, "train"), seed=seed)
    cap = os.environ.get(WORKERS_ENV)
    if cap:
        train = dataclasses.replace(train, workers=max(1, min(train.workers, int(cap))))

    loss_raw = _section(raw, "loss")
    if "mode" in loss_raw:
        loss_raw["mode"] = LOSS_ALIASES.get(loss_raw["mode"], loss_raw["mode"])
    loss = LossConfig(**loss_raw)
    if loss.levels is not None:
        bad = [l for l in loss.levels if not 1 <= l <= model.num_levels]
        if bad:
            raise ConfigError(
                f"loss.levels {list(loss.levels)} must lie in 1..{model.num_levels} "
                f"(model.widths has {model.num_levels} stages)"
            )

    server = ServerOptState(**_section(raw, "server"))
    out = str(raw.get("out", ExperimentConfig.out))
    return ExperimentConfig(dataset, partition, model, train, loss, server, seed, out)


def load_raw(path: str | os.PathLike) -> dict:
    """Read a YAML or JSON config file into a mapping."""
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return data or {}


def parse_config(path: str | os.PathLike, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    raw = load_raw(path)
    for key, value in (overrides or {}).items():
        set_dotted(raw, key, value)
    return from_dict(raw)


def set_dotted(raw: dict, key: str, value) -> None:
    """``set_dotted(d, "loss.tau", 0.1)`` sets ``d["loss"]["tau"] = 0.1``."""
    parts = key.split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key!r}: {p!r} is not a section")
    node[parts[-1]] = value


def echo_config(config: ExperimentConfig, path: str | os.PathLike) -> None:
    """Write the fully resolved config where :func:`parse_config` can read it back."""
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
