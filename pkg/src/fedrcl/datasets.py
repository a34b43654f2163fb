"""Datasets and heterogeneous client partitioning.

Two data sources are supported: the CIFAR-10/100 python-free binary
releases, and isotropic Gaussian blobs for desk-scale experiments.
Partitions are pure functions of ``(dataset, config)``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

CIFAR_PIXELS = 3 * 32 * 32
_RECORD_LAYOUT = {
    # variant: (record length, offset of the label byte used, num classes)
    "cifar10": (1 + CIFAR_PIXELS, 0, 10),
    "cifar100": (2 + CIFAR_PIXELS, 1, 100),
}

SCHEMES = ("iid", "dirichlet", "quantity")


@dataclass(frozen=True)
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.samples) == 0:
            raise DataError("dataset is empty (M = 0)")
        if len(self.samples) != len(self.labels):
            raise DataError(
                f"{len(self.samples)} samples but {len(self.labels)} labels"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(
                f"labels must lie in [0, {self.num_classes - 1}], "
                f"got range [{self.labels.min()}, {self.labels.max()}]"
            )
        if not np.all(np.isfinite(self.samples)):
            raise DataError("dataset contains non-finite sample values")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.samples[indices], self.labels[indices], self.num_classes)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# ---------------------------------------------------------------------------
# CIFAR binary format
# ---------------------------------------------------------------------------

def load_cifar_binary(path: str | os.PathLike, variant: str = "cifar10") -> LabeledDataset:
    """Read a CIFAR binary batch file.

    cifar10 records are ``<label><3072 pixels>``; cifar100 records are
    ``<coarse><fine><3072 pixels>`` and the fine label is used. Pixels are
    stored plane-major (all R, then G, then B) for a 32x32 image.
    """
    if variant not in _RECORD_LAYOUT:
        raise ConfigError(f"unknown CIFAR variant {variant!r}")
    record_len, label_offset, num_classes = _RECORD_LAYOUT[variant]
    raw = Path(path).read_bytes()
    if len(raw) % record_len:
        complete = len(raw) // record_len
        raise FormatError(
            f"{path}: truncated record starting at byte offset {complete * record_len} "
            f"(file size {len(raw)} is not a multiple of {record_len})"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record_len)
    labels = records[:, label_offset].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        raise DataError(
            f"{path}: record {bad[0]} has label {labels[bad[0]]} >= {num_classes}"
        )
    pixels = records[:, record_len - CIFAR_PIXELS:].reshape(-1, 3, 32, 32)
    return LabeledDataset(pixels.astype(np.float64) / 255.0, labels, num_classes)


def write_cifar_binary(
    path: str | os.PathLike,
    pixels: np.ndarray,
    labels,
    variant: str = "cifar10",
    coarse_labels=None,
) -> None:
    """Write uint8 images of shape (M, 3, 32, 32) in CIFAR binary layout."""
    record_len, label_offset, _ = _RECORD_LAYOUT[variant]
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), CIFAR_PIXELS)
    out = np.empty((len(labels), record_len), dtype=np.uint8)
    out[:, label_offset] = np.asarray(labels, dtype=np.uint8)
    if variant == "cifar100":
        out[:, 0] = 0 if coarse_labels is None else np.asarray(coarse_labels, dtype=np.uint8)
    out[:, record_len - CIFAR_PIXELS:] = pixels
    Path(path).write_bytes(out.tobytes())


# ---------------------------------------------------------------------------
# Synthetic blobs
# ---------------------------------------------------------------------------

def generate_synthetic(
    num_classes: int, per_class: int, dim: int, spread: float, seed: int = 0
) -> LabeledDataset:
    """Gaussian blobs of std ``spread`` around unit-norm random class centers.

    Labels are balanced and sorted (``per_class`` copies of 0, then 1, ...).
    """
    if num_classes < 2 or per_class < 2:
        raise ConfigError("synthetic data needs num_classes >= 2 and per_class >= 2")
    if spread <= 0:
        raise ConfigError("spread must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    noise = rng.standard_normal((num_classes, per_class, dim)) * spread
    samples = (centers[:, None, :] + noise).reshape(-1, dim)
    labels = np.repeat(np.arange(num_classes), per_class)
    return LabeledDataset(samples, labels, num_classes)


def split_per_class(dataset: LabeledDataset, per_class: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Move the last ``per_class`` samples of every class into a second dataset."""
    held = []
    for c in range(dataset.num_classes):
        idx = np.nonzero(dataset.labels == c)[0]
        if len(idx) <= per_class:
            raise ConfigError(f"class {c} has {len(idx)} samples, cannot hold out {per_class}")
        held.append(idx[-per_class:])
    held = np.sort(np.concatenate(held))
    keep = np.setdiff1d(np.arange(len(dataset)), held)
    return dataset.subset(keep), dataset.subset(held)


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PartitionConfig:
    scheme: str
    num_clients: int
    alpha: float | None = None
    gamma: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown partition scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.scheme == "dirichlet":
            if self.alpha is None or not self.alpha > 0:
                raise ConfigError("dirichlet partition requires alpha > 0")
            if self.gamma is not None:
                raise ConfigError("gamma is only valid for the quantity scheme")
        elif self.scheme == "quantity":
            if self.gamma is None or self.gamma < 1:
                raise ConfigError("quantity partition requires gamma >= 1")
            if self.alpha is not None:
                raise ConfigError("alpha is only valid for the dirichlet scheme")
        elif self.alpha is not None or self.gamma is not None:
            raise ConfigError("iid partition takes neither alpha nor gamma")


@dataclass
class PartitionPlan:
    assignments: list[np.ndarray]
    label_histograms: np.ndarray
    global_histogram: np.ndarray
    config: PartitionConfig
    metadata: dict = field(default_factory=dict)

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "assignments": [a.tolist() for a in self.assignments],
            "label_histograms": self.label_histograms.tolist(),
            "global_histogram": self.global_histogram.tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionPlan":
        return cls(
            assignments=[np.asarray(a, dtype=np.int64) for a in d["assignments"]],
            label_histograms=np.asarray(d["label_histograms"], dtype=np.int64),
            global_histogram=np.asarray(d["global_histogram"], dtype=np.int64),
            config=PartitionConfig(**d["config"]),
            metadata=d.get("metadata", {}),
        )


def save_plan(plan: PartitionPlan, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), indent=1, sort_keys=True) + "\n")


def load_plan(path: str | os.PathLike) -> PartitionPlan:
    return PartitionPlan.from_dict(json.loads(Path(path).read_text()))


def _round_to_total(weights: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder rounding of ``total * weights / sum(weights)``."""
    weights = np.asarray(weights, dtype=np.float64)
    if total == 0:
        return np.zeros(len(weights), dtype=np.int64)
    s = weights.sum()
    if s <= 0:
        raise ValueError("cannot round with all-zero weights")
    exact = total * weights / s
    counts = np.floor(exact).astype(np.int64)
    short = total - counts.sum()
    if short:
        # stable order so ties resolve by class index
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _dirichlet_counts(proportions, available, size) -> tuple[np.ndarray, int]:
    """Integer per-class counts summing to ``size`` and bounded by ``available``.

    Requested counts that exceed what is left of a class are cut, and the
    deficit is re-spread over classes that still have room, in proportion
    to the client's sampled proportions (or to the room left when those
    proportions are all zero). Returns the counts and the number of repairs.
    """
    counts = _round_to_total(proportions, size)
    repairs = 0
    while True:
        over = counts > available
        if not over.any():
            return counts, repairs
        repairs += 1
        deficit = int((counts - available)[over].sum())
        counts = np.minimum(counts, available)
        room = available - counts
        w = np.where(room > 0, proportions, 0.0)
        if w.sum() <= 0:
            w = room.astype(np.float64)
        counts = counts + _round_to_total(w, deficit)


def partition(dataset: LabeledDataset, config: PartitionConfig) -> PartitionPlan:
    """Split dataset indices among ``config.num_clients`` clients.

    Every client receives ``floor(M / N)`` samples (``floor(M / (gamma N))``
    times gamma for the quantity scheme); leftovers are dropped.
    """
    labels = dataset.labels
    M, N, Q = len(labels), config.num_clients, dataset.num_classes
    if N > M:
        raise ConfigError(f"num_clients={N} exceeds dataset size {M}")
    rng = np.random.default_rng(config.seed)
    metadata: dict = {}

    if config.scheme == "iid":
        size = M // N
        perm = rng.permutation(M)
        assignments = [np.sort(perm[i * size:(i + 1) * size]) for i in range(N)]

    elif config.scheme == "dirichlet":
        size = M // N
        pools = [rng.permutation(np.nonzero(labels == c)[0]) for c in range(Q)]
        taken = np.zeros(Q, dtype=np.int64)
        assignments, repairs = [], []
        for _ in range(N):
            proportions = rng.dirichlet(np.full(Q, config.alpha))
            available = np.array([len(p) for p in pools]) - taken
            counts, n_rep = _dirichlet_counts(proportions, available, size)
            repairs.append(n_rep)
            idx = [pools[c][taken[c]:taken[c] + counts[c]] for c in range(Q)]
            taken += counts
            assignments.append(np.sort(np.concatenate(idx)))
        metadata["feasibility_rule"] = "cap-and-redistribute-proportionally"
        metadata["repairs_per_client"] = repairs

    else:  # quantity
        num_shards = config.gamma * N
        shard = M // num_shards
        if shard == 0:
            raise ConfigError(
                f"quantity partition with gamma*N={num_shards} shards leaves empty shards for M={M}"
            )
        order = np.argsort(labels, kind="stable")
        shards = order[: shard * num_shards].reshape(num_shards, shard)
        deal = rng.permutation(num_shards)
        assignments = [
            np.sort(shards[deal[i * config.gamma:(i + 1) * config.gamma]].ravel())
            for i in range(N)
        ]

    histograms = np.stack([np.bincount(labels[a], minlength=Q) for a in assignments])
    metadata["dropped"] = int(M - sum(len(a) for a in assignments))
    return PartitionPlan(
        assignments=[a.astype(np.int64) for a in assignments],
        label_histograms=histograms.astype(np.int64),
        global_histogram=dataset.label_histogram().astype(np.int64),
        config=config,
        metadata=metadata,
    )


@dataclass(frozen=True)
class PartitionSummary:
    sizes: np.ndarray
    class_counts: np.ndarray
    disjoint: bool
    heterogeneity: float
    tv_distances: np.ndarray


def partition_stats(plan: PartitionPlan) -> PartitionSummary:
    """Sizes, disjointness and mean total-variation distance to the global label mix."""
    sizes = np.array([len(a) for a in plan.assignments], dtype=np.int64)
    flat = np.concatenate(plan.assignments) if plan.assignments else np.array([], dtype=np.int64)
    disjoint = len(np.unique(flat)) == len(flat)

    glob = plan.global_histogram / plan.global_histogram.sum()
    rows = plan.label_histograms.astype(np.float64)
    totals = rows.sum(axis=1, keepdims=True)
    local = np.divide(rows, totals, out=np.zeros_like(rows), where=totals > 0)
    tv = 0.5 * np.abs(local - glob).sum(axis=1)
    return PartitionSummary(
        sizes=sizes,
        class_counts=plan.label_histograms.sum(axis=0),
        disjoint=bool(disjoint),
        heterogeneity=float(tv.mean()),
        tv_distances=tv,
    )
