"""Running configured experiments and comparing their metric logs.

A run directory holds ``config.yaml`` (resolved config echo),
``partition.json``, ``metrics.jsonl`` (one row per evaluation round) and
``summary.json``. Rows are flushed as they are produced, so a failed run
keeps everything logged up to the failure.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import subprocess
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig, echo_config
from .datasets import (
    LabeledDataset, generate_synthetic, load_cifar_binary, partition, save_plan, split_per_class,
)
from .engine import RoundRecord, TrainingAborted, derived_seed, run_training
from .errors import FedRCLError, FormatError

log = logging.getLogger(__name__)

METRIC_KEYS = (
    "round", "accuracy", "trace_within", "trace_between",
    "effective_rank", "vci", "mean_deviation_bound", "mean_local_loss",
)


def load_datasets(config: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset | None]:
    ds_spec = config.dataset
    if ds_spec.kind == "synthetic":
        full = generate_synthetic(
            ds_spec.num_classes, ds_spec.per_class + ds_spec.test_per_class, ds_spec.dim, ds_spec.spread,
            seed=derived_seed(config.seed, "data"),
        )
        return split_per_class(full, ds_spec.test_per_class)

    def read(files, limit):
        parts = [load_cifar_binary(f, ds_spec.kind) for f in files]
        x = np.concatenate([p.samples for p in parts])
        y = np.concatenate([p.labels for p in parts])
        if limit is not None:
            x, y = x[:limit], y[:limit]
        return LabeledDataset(x, y, ds_spec.classes)

    train = read(ds_spec.train_files, ds_spec.max_train)
    test = read(ds_spec.test_files, ds_spec.max_test) if ds_spec.test_files else None
    return train, test


def code_revision() -> str:
    """Package version, plus the git commit when run from a checkout."""
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def format_row(rec: RoundRecord) -> str:
    row = {k: _clean(v) for k, v in rec.metrics_row().items()}
    return json.dumps(row, sort_keys=False)


def summarize(rows: Sequence[dict]) -> dict:
    acc = [(r["round"], r["accuracy"]) for r in rows if r.get("accuracy") is not None]
    out = {"rounds_logged": len(rows)}
    if acc:
        rounds, values = zip(*acc)
        best = int(np.argmax(values))
        out.update(
            final_round=rounds[-1], final_accuracy=values[-1],
            best_accuracy=values[best], best_round=rounds[best],
            auc_accuracy=accuracy_auc(rounds, values),
        )
    if rows:
        last = rows[-1]
        out.update({k: last.get(k) for k in ("trace_within", "trace_between", "effective_rank", "vci",
                                             "mean_deviation_bound")})
    return out


def accuracy_auc(rounds, values) -> float:
    """Area under the accuracy curve divided by the round span (mean accuracy)."""
    rounds = np.asarray(rounds, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(rounds) == 1:
        return float(values[0])
    area = float(np.sum((values[1:] + values[:-1]) * np.diff(rounds)) / 2)
    return area / float(rounds[-1] - rounds[0])


def run_experiment(config: ExperimentConfig) -> int:
    """Run one configured experiment; returns 0 on success and 1 on failure."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(config, out / "config.yaml")
    summary = {"status": "ok", "revision": code_revision(), "seed": config.seed}
    rows: list[dict] = []
    try:
        train, test = load_datasets(config)
        plan = partition(train, config.partition)
        save_plan(plan, out / "partition.json")
        with open(out / "metrics.jsonl", "w") as fh:
            def on_round(rec: RoundRecord) -> None:
                if rec.accuracy is None and rec.collapse is None:
                    return
                line = format_row(rec)
                rows.append(json.loads(line))
                fh.write(line + "\n")
                fh.flush()

            run_training(
                train, plan, config.model, config.train, config.loss, config.server,
                eval_data=test, on_round=on_round, checkpoint_dir=out,
            )
    except (FedRCLError, TrainingAborted, OSError) as exc:
        log.error("run failed: %s", exc)
        summary.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    summary.update(summarize(rows))
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return 0 if summary["status"] == "ok" else 1


# ---------------------------------------------------------------------------
# Comparing runs
# ---------------------------------------------------------------------------

def read_metrics(path: str | os.PathLike) -> list[dict]:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        row = json.loads(line)
        if tuple(row) != METRIC_KEYS:
            raise FormatError(f"{path}:{n}: keys {list(row)} do not match the metrics schema {list(METRIC_KEYS)}")
        if rows and row["round"] <= rows[-1]["round"]:
            raise FormatError(f"{path}:{n}: round {row['round']} does not increase")
        rows.append(row)
    if not rows:
        raise FormatError(f"{path}: no metric rows")
    return rows


COMPARE_COLUMNS = (
    "run", "final_round", "final_accuracy", "best_accuracy", "auc_accuracy",
    "trace_within", "trace_between", "effective_rank", "vci", "mean_deviation_bound",
)


def compare_runs(paths: Sequence[str | os.PathLike], out_csv: str | os.PathLike | None = None) -> str:
    """Summarize several metric logs over their common rounds as CSV text.

    Logs must share the schema; they are aligned by keeping only rounds
    that every log contains.
    """
    logs = [read_metrics(p) for p in paths]
    common = set.intersection(*({r["round"] for r in rows} for rows in logs))
    if not common:
        raise FormatError("the logs share no rounds")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COMPARE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for path, rows in zip(paths, logs):
        aligned = [r for r in rows if r["round"] in common]
        s = summarize(aligned)
        writer.writerow({"run": str(path), **{k: s.get(k) for k in COMPARE_COLUMNS[1:]}})
    text = buf.getvalue()
    if out_csv is not None:
        Path(out_csv).write_text(text)
    return text
