"""Federated training loop: sampling, local SGD, aggregation, server step.

Randomness comes from one master seed split into named substreams, so
results do not depend on the order in which clients finish.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import checkpoint
from .datasets import LabeledDataset, PartitionPlan
from .diagnostics import CollapseMetrics, collapse_metrics, deviation_report
from .errors import ConfigError, NumericalError, ShapeError
from .losses import LossConfig
from .model import ArchConfig, ModelParams, arch_from_dict, forward, init_model, loss_and_grad_tensor

log = logging.getLogger(__name__)

SERVER_KINDS = ("fedavg", "fedavgm", "fedadam")
_STREAMS = {"partition": 0, "init": 1, "sampling": 2, "shuffle": 3, "data": 4}


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *keys)``."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_STREAMS[name], *keys))
    return np.random.default_rng(ss)


def derived_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2**31 - 1))


@dataclass(frozen=True)
class TrainConfig:
    rounds: int = 100
    local_epochs: int = 5
    iters_per_epoch: int = 10
    participation: float = 0.05
    lr: float = 0.1
    lr_decay: float = 0.998
    weight_decay: float = 0.001
    momentum: float = 0.0
    seed: int = 0
    eval_every: int = 5
    diag_every: int = 5
    diag_split: str = "test"
    workers: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 1 or self.iters_per_epoch < 1:
            raise ConfigError("rounds, local_epochs and iters_per_epoch must be >= 1")
        if not 0 < self.participation <= 1:
            raise ConfigError("participation must lie in (0, 1]")
        if self.diag_split not in ("test", "train"):
            raise ConfigError("diag_split must be 'test' or 'train'")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def lr_at(self, round_index: int) -> float:
        return self.lr * self.lr_decay ** round_index


@dataclass(frozen=True)
class ServerOptState:
    kind: str = "fedavg"
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)
    beta_m: float = 0.4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 0.001
    server_lr: float = 0.01

    def __post_init__(self):
        if self.kind not in SERVER_KINDS:
            raise ConfigError(f"unknown server optimizer {self.kind!r}; expected one of {SERVER_KINDS}")

    def initialized(self, size: int) -> "ServerOptState":
        m = np.zeros(size) if self.m is None else self.m
        v = np.zeros(size) if self.v is None else self.v
        if m.shape != (size,) or v.shape != (size,):
            raise ShapeError("server optimizer buffers do not match the parameter vector")
        return replace(self, m=m, v=v)

    def hyperparams(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in ("m", "v")}


def server_step(state: ServerOptState, global_params: ModelParams, aggregated: ModelParams):
    """Apply the pseudo-gradient ``aggregated - global`` as an ascent step."""
    state = state.initialized(global_params.size)
    theta = global_params.vector
    delta = aggregated.vector - theta
    if state.kind == "fedavg":
        return aggregated, state
    if state.kind == "fedavgm":
        # theta + m written as aggregated + beta_m * m_prev, exact for beta_m = 0
        carry = state.beta_m * state.m
        return aggregated.with_vector(aggregated.vector + carry), replace(state, m=carry + delta)
    m = state.beta1 * state.m + (1 - state.beta1) * delta
    v = state.beta2 * state.v + (1 - state.beta2) * delta * delta
    new = theta + state.server_lr * m / (np.sqrt(v) + state.eps)
    return global_params.with_vector(new), replace(state, m=m, v=v)


def sample_clients(num_clients: int, participation: float, rng: np.random.Generator) -> list[int]:
    if not 0 < participation <= 1:
        raise ConfigError("participation must lie in (0, 1]")
    k = max(1, round(participation * num_clients))
    return sorted(int(c) for c in rng.choice(num_clients, size=k, replace=False))


def aggregate(client_params: Sequence[ModelParams]) -> ModelParams:
    """Unweighted mean, summed in the given order."""
    if not client_params:
        raise ShapeError("nothing to aggregate")
    first = client_params[0]
    total = np.zeros_like(first.vector)
    for p in client_params:
        if not p.same_layout(first):
            raise ShapeError("client parameter layouts differ")
        total += p.vector
    return first.with_vector(total / len(client_params))


@dataclass
class LocalResult:
    params: ModelParams
    losses: list[float]

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan


def local_train(
    snapshot: ModelParams,
    data: LabeledDataset,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    round_index: int = 1,
    client_id: int = 0,
) -> LocalResult:
    """Local SGD from ``snapshot`` on one client's data.

    Batches are ``ceil(n / iters_per_epoch)`` samples with the short tail
    kept; weight decay is added to the gradient.
    """
    n = len(data)
    if n == 0:
        raise ConfigError(f"client {client_id} has no data")
    arch = snapshot.arch
    lr = train_cfg.lr_at(round_index)
    rng = substream(train_cfg.seed, "shuffle", round_index, client_id)
    x_all = torch.as_tensor(np.asarray(data.samples, dtype=np.float64))
    y_all = torch.as_tensor(np.asarray(data.labels), dtype=torch.long)
    glob = torch.as_tensor(snapshot.vector)
    theta = glob.clone()
    buf = torch.zeros_like(theta) if train_cfg.momentum else None
    bs = math.ceil(n / train_cfg.iters_per_epoch)
    losses = []
    for epoch in range(train_cfg.local_epochs):
        perm = torch.as_tensor(rng.permutation(n))
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            try:
                parts, g = loss_and_grad_tensor(theta, arch, x_all[idx], y_all[idx], loss_cfg, glob)
            except NumericalError as exc:
                exc.payload.update(round=round_index, client=client_id, epoch=epoch, step=start // bs)
                raise
            step = g + train_cfg.weight_decay * theta
            if buf is not None:
                buf = train_cfg.momentum * buf + step
                step = buf
            theta = theta - lr * step
            losses.append(float(parts.total))
    return LocalResult(snapshot.with_vector(theta.numpy().copy()), losses)


@dataclass
class RoundRecord:
    round: int
    clients: list[int]
    client_losses: dict[int, float]
    accuracy: float | None = None
    collapse: CollapseMetrics | None = None
    deviation: dict | None = None

    @property
    def mean_local_loss(self) -> float:
        return float(np.mean(list(self.client_losses.values())))

    def metrics_row(self) -> dict:
        c = self.collapse
        return {
            "round": self.round,
            "accuracy": self.accuracy,
            "trace_within": None if c is None else c.trace_within,
            "trace_between": None if c is None else c.trace_between,
            "effective_rank": None if c is None else c.effective_rank,
            "vci": None if c is None else c.vci,
            "mean_deviation_bound": None if self.deviation is None else _finite_or_none(self.deviation["mean"]),
            "mean_local_loss": self.mean_local_loss,
        }


def _finite_or_none(x):
    return x if x is not None and math.isfinite(x) else None


class TrainingHistory(list):
    """Round records plus the final global model and server state."""

    final_params: ModelParams
    server_state: ServerOptState


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, records: list[RoundRecord], cause: Exception):
        super().__init__(message)
        self.records = records
        self.cause = cause


def evaluate_features(params: ModelParams, data: LabeledDataset, batch_size: int = 1024):
    """Final-level embeddings, class probabilities and accuracy on ``data``."""
    feats, probs = [], []
    for i in range(0, len(data), batch_size):
        stack = forward(params, data.samples[i:i + batch_size])
        feats.append(stack.embeddings[-1].numpy())
        probs.append(stack.probs.numpy())
    feats, probs = np.concatenate(feats), np.concatenate(probs)
    acc = float(np.mean(probs.argmax(axis=1) == data.labels))
    return feats, probs, acc


def save_training_checkpoint(path, params: ModelParams, state: ServerOptState, round_index: int) -> None:
    state = state.initialized(params.size)
    checkpoint.write_arrays(
        path,
        {"params": params.vector, "server_m": state.m, "server_v": state.v},
        {"arch": params.arch.to_dict(), "round": round_index, "server": state.hyperparams()},
    )


def load_training_checkpoint(path) -> tuple[ModelParams, ServerOptState, int]:
    arrays, meta = checkpoint.read_arrays(path)
    params = ModelParams(arch_from_dict(meta["arch"]), arrays["params"])
    state = ServerOptState(m=arrays["server_m"], v=arrays["server_v"], **meta["server"])
    return params, state, int(meta["round"])


def run_training(
    train: LabeledDataset,
    plan: PartitionPlan,
    arch: ArchConfig,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    server: ServerOptState | str = "fedavg",
    eval_data: LabeledDataset | None = None,
    on_round: Callable[[RoundRecord], None] | None = None,
    init_params: ModelParams | None = None,
    checkpoint_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> TrainingHistory:
    """Run ``train_cfg.rounds`` communication rounds and return one record per round.

    Evaluation and diagnostics run every ``eval_every`` / ``diag_every``
    rounds and always at the final round. ``on_round`` is called after
    each round, before the next one starts.
    """
    if arch.num_classes != train.num_classes:
        raise ConfigError(f"arch.num_classes={arch.num_classes} but dataset has {train.num_classes} classes")
    loss_cfg.resolved_levels(arch.num_levels)
    state = ServerOptState(kind=server) if isinstance(server, str) else server
    start = 1
    if resume_from is not None:
        params, state, last = load_training_checkpoint(resume_from)
        start = last + 1
    elif init_params is not None:
        params = init_params
    else:
        params = init_model(arch, derived_seed(train_cfg.seed, "init"))
    state = state.initialized(params.size)

    client_data = [train.subset(a) for a in plan.assignments]
    if any(len(d) == 0 for d in client_data):
        raise ConfigError("partition plan contains an empty client")
    diag_data = eval_data if train_cfg.diag_split == "test" else train

    pool = ThreadPoolExecutor(train_cfg.workers) if train_cfg.workers > 1 else None
    records = TrainingHistory()
    try:
        for t in range(start, train_cfg.rounds + 1):
            clients = sample_clients(plan.num_clients, train_cfg.participation, substream(train_cfg.seed, "sampling", t))
            snapshot = params

            def job(cid, snapshot=snapshot, t=t):
                return local_train(snapshot, client_data[cid], train_cfg, loss_cfg, t, cid)

            try:
                results = list(pool.map(job, clients)) if pool else [job(c) for c in clients]
            except NumericalError as exc:
                raise TrainingAborted(f"round {t}: {exc} {exc.payload}", records, exc) from exc

            aggregated = aggregate([r.params for r in results])
            params, state = server_step(state, params, aggregated)
            rec = RoundRecord(t, clients, {c: r.final_loss for c, r in zip(clients, results)})

            last = t == train_cfg.rounds
            if eval_data is not None and (last or t % train_cfg.eval_every == 0):
                _, _, rec.accuracy = evaluate_features(params, eval_data)
            if diag_data is not None and (last or t % train_cfg.diag_every == 0):
                feats, probs, _ = evaluate_features(params, diag_data)
                rec.collapse = collapse_metrics(feats, diag_data.labels)
                rec.deviation = deviation_report(feats, probs, diag_data.labels, arch.num_classes).summary()

            records.append(rec)
            if on_round is not None:
                on_round(rec)
            if checkpoint_dir is not None and train_cfg.checkpoint_every and (last or t % train_cfg.checkpoint_every == 0):
                save_training_checkpoint(Path(checkpoint_dir) / "checkpoint.bin", params, state, t)
    finally:
        if pool is not None:
            pool.shutdown()
    records.final_params = params
    records.server_state = state
    return records
