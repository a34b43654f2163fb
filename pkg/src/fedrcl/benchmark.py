"""Desk-scale benchmark comparing ce, ce+scl and ce+rcl.

Synthetic 8-class blobs split over 10 clients with Dirichlet(0.1) label
skew, half of the clients sampled per round, a 2-stage dense backbone and
60 rounds. Every (mode, seed) pair is a regular experiment run written
under ``out/<mode>/seed<k>``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, from_dict
from .experiment import read_metrics, run_experiment

MODES = ("ce", "ce+scl", "ce+rcl")
EARLY_ROUND = 10

BENCHMARK = {
    "dataset": {"kind": "synthetic", "num_classes": 8, "per_class": 125, "test_per_class": 100,
                "dim": 32, "spread": 0.6},
    "partition": {"scheme": "dirichlet", "num_clients": 10, "alpha": 0.1},
    "model": {"widths": [32, 32]},
    "train": {"rounds": 60, "local_epochs": 2, "participation": 0.5, "lr": 0.03,
              "eval_every": 10, "diag_every": 10},
    "loss": {},
}


def benchmark_config(mode: str, seed: int, out: str | Path) -> ExperimentConfig:
    raw = copy.deepcopy(BENCHMARK)
    raw["loss"]["mode"] = mode
    raw["seed"] = seed
    raw["out"] = str(out)
    return from_dict(raw)


@dataclass
class BenchmarkResult:
    seeds: list[int]
    final_accuracy: dict[str, list[float]] = field(default_factory=dict)
    early_rank: dict[str, list[float]] = field(default_factory=dict)
    final_vci: dict[str, list[float]] = field(default_factory=dict)
    failed: list[str] = field(default_factory=list)

    def mean(self, table: str, mode: str) -> float:
        return float(np.mean(getattr(self, table)[mode]))

    @property
    def rcl_gain(self) -> float:
        """Mean final accuracy of ce+rcl minus ce, in accuracy points."""
        return 100.0 * (self.mean("final_accuracy", "ce+rcl") - self.mean("final_accuracy", "ce"))


def run_benchmark(out: str | Path, seeds: Sequence[int] = (0, 1, 2), modes: Sequence[str] = MODES) -> BenchmarkResult:
    res = BenchmarkResult(list(seeds))
    for mode in modes:
        for table in (res.final_accuracy, res.early_rank, res.final_vci):
            table[mode] = []
        for seed in seeds:
            run_dir = Path(out) / mode / f"seed{seed}"
            if run_experiment(benchmark_config(mode, seed, run_dir)) != 0:
                res.failed.append(str(run_dir))
                continue
            rows = read_metrics(run_dir / "metrics.jsonl")
            early = next(r for r in rows if r["round"] == EARLY_ROUND)
            res.final_accuracy[mode].append(rows[-1]["accuracy"])
            res.early_rank[mode].append(early["effective_rank"])
            res.final_vci[mode].append(rows[-1]["vci"])
    return res


def report(res: BenchmarkResult) -> str:
    lines = [f"seeds: {res.seeds}", f"{'mode':8s} {'final acc':>10s} {'erank@10':>10s} {'final vci':>10s}"]
    for mode in res.final_accuracy:
        lines.append(f"{mode:8s} {res.mean('final_accuracy', mode):10.4f} "
                     f"{res.mean('early_rank', mode):10.3f} {res.mean('final_vci', mode):10.4f}")
    if {"ce", "ce+rcl"} <= set(res.final_accuracy):
        lines.append(f"ce+rcl minus ce: {res.rcl_gain:+.2f} points")
    if res.failed:
        lines.append(f"failed runs: {res.failed}")
    return "\n".join(lines)
