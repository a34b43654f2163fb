"""Local training objectives.

Contrastive losses work on cosine similarities of per-level embeddings.
The relaxed variant adds, for every positive pair of an anchor, a
divergence penalty

    beta * log( sum_{k in P(i)} exp(s_ik / tau) + exp(1 / tau) )

where P(i) are same-class samples (anchor excluded) whose cosine
similarity to the anchor exceeds ``lam``.

Batch totals are divided by the number of anchors that have at least one
positive; the raw sum is kept in :class:`ContrastiveTerms`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch

from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

MODES = ("ce", "ce+scl", "ce+rcl", "ce+prox")
CE_LOG_FLOOR = math.log(1e-12)


@dataclass(frozen=True)
class LossConfig:
    mode: str = "ce+rcl"
    tau: float = 0.05
    lam: float = 0.7
    beta: float = 1.0
    mu: float = 0.001
    levels: tuple[int, ...] | None = None  # 1-based; None means every level
    ce_weight: float = 1.0
    contrastive_weight: float = 1.0
    hard_mining: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown loss mode {self.mode!r}; expected one of {MODES}")
        for name in ("tau", "lam", "beta", "mu", "ce_weight", "contrastive_weight"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not -1 < self.lam < 1:
            raise ConfigError("lam must lie in (-1, 1)")
        if self.beta < 0 or self.mu < 0:
            raise ConfigError("beta and mu must be non-negative")
        if self.levels is not None:
            object.__setattr__(self, "levels", tuple(int(l) for l in self.levels))
            if not self.levels:
                raise ConfigError("levels must be non-empty when given")

    @property
    def contrastive(self) -> bool:
        return self.mode in ("ce+scl", "ce+rcl")

    def resolved_levels(self, num_levels: int) -> tuple[int, ...]:
        levels = self.levels if self.levels is not None else tuple(range(1, num_levels + 1))
        bad = [l for l in levels if not 1 <= l <= num_levels]
        if bad:
            raise ConfigError(f"levels {bad} outside 1..{num_levels}")
        return levels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = None if self.levels is None else list(self.levels)
        return d


def _t(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a if a.dtype == torch.float64 else a.to(torch.float64)
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def _labels(y) -> torch.Tensor:
    if isinstance(y, torch.Tensor):
        return y.long()
    return torch.as_tensor(np.asarray(y), dtype=torch.long)


def cross_entropy(logits, labels) -> torch.Tensor:
    logits, labels = _t(logits), _labels(labels)
    if logits.shape[0] < 1:
        raise ShapeError("cross_entropy needs at least one sample")
    logp = torch.log_softmax(logits, dim=1).gather(1, labels[:, None]).squeeze(1)
    return -logp.clamp_min(CE_LOG_FLOOR).mean()


def cosine_similarity_matrix(emb: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Pairwise cosine similarities; zero-norm rows get similarity 0 to everything."""
    norms = torch.linalg.vector_norm(emb, dim=1, keepdim=True)
    live = norms > 0
    # divide by 1 on dead rows so they carry neither value nor gradient
    z = torch.where(live, emb / torch.where(live, norms, torch.ones_like(norms)), torch.zeros_like(emb))
    return z @ z.T, int((~live).sum())


@dataclass
class ContrastiveTerms:
    per_anchor: torch.Tensor      # (B,) summed over each anchor's positives
    num_positives: torch.Tensor   # (B,)
    num_anchors: int              # anchors with >= 1 positive
    zero_norm: int                # embeddings with zero norm (similarity forced to 0)

    @property
    def raw_sum(self) -> torch.Tensor:
        return self.per_anchor.sum()

    @property
    def loss(self) -> torch.Tensor:
        if self.num_anchors == 0:
            return self.per_anchor.sum() * 0.0
        return self.per_anchor.sum() / self.num_anchors


def _hard_masks(sim, pos, neg, n_pos: int = 1, n_neg: int = 2):
    """Keep the least similar positives and the most similar negatives per anchor."""
    s = sim.detach()
    keep_pos = torch.zeros_like(pos)
    keep_neg = torch.zeros_like(neg)
    for i in range(s.shape[0]):
        p = torch.nonzero(pos[i]).squeeze(1)
        if p.numel():
            keep_pos[i, p[torch.argsort(s[i, p])[:n_pos]]] = True
        n = torch.nonzero(neg[i]).squeeze(1)
        if n.numel():
            keep_neg[i, n[torch.argsort(-s[i, n])[:n_neg]]] = True
    return keep_pos, keep_pos | keep_neg


def contrastive_terms(embeddings, labels, tau: float, lam: float = 0.7, beta: float = 0.0,
                      hard_mining: bool = False) -> ContrastiveTerms:
    """Per-anchor supervised contrastive terms, with the relaxed penalty when ``beta > 0``."""
    emb, y = _t(embeddings), _labels(labels)
    B = emb.shape[0]
    if B < 2:
        raise ShapeError("contrastive losses need a batch of at least 2")
    sim, zero = cosine_similarity_matrix(emb)
    if zero:
        log.debug("%d zero-norm embeddings; their similarities are set to 0", zero)
    logits = sim / tau
    eye = torch.eye(B, dtype=torch.bool)
    same = y[:, None] == y[None, :]
    pos = same & ~eye
    denom = ~eye
    if hard_mining:
        pos, denom = _hard_masks(sim, pos, ~same)

    neg_inf = torch.tensor(-math.inf, dtype=logits.dtype)
    log_denom = torch.logsumexp(torch.where(denom, logits, neg_inf), dim=1)
    pair = torch.where(pos, log_denom[:, None] - logits, torch.zeros_like(logits))
    per_anchor = pair.sum(dim=1)
    n_pos = pos.sum(dim=1)

    if beta != 0.0:
        in_p = same & ~eye & (sim > lam)
        masked = torch.where(in_p, logits, neg_inf)
        self_floor = torch.full((B, 1), 1.0 / tau, dtype=logits.dtype)
        penalty = torch.logsumexp(torch.cat([masked, self_floor], dim=1), dim=1)
        per_anchor = per_anchor + beta * n_pos.to(logits.dtype) * penalty

    return ContrastiveTerms(per_anchor, n_pos, int((n_pos > 0).sum()), zero)


def scl_loss(embeddings, labels, tau: float = 0.05, hard_mining: bool = False) -> torch.Tensor:
    return contrastive_terms(embeddings, labels, tau, beta=0.0, hard_mining=hard_mining).loss


def rcl_loss(embeddings, labels, tau: float = 0.05, lam: float = 0.7, beta: float = 1.0,
             hard_mining: bool = False) -> torch.Tensor:
    return contrastive_terms(embeddings, labels, tau, lam, beta, hard_mining).loss


def scl_loss_split(embeddings, labels, tau: float = 0.05) -> float:
    """SCL written as sum over positives of ``-s_ij/tau + log sum_{k != i} exp(s_ik/tau)``.

    Plain numpy with explicit loops; shares no code with :func:`scl_loss`.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    norms = np.linalg.norm(emb, axis=1)
    B = len(y)
    total, anchors = 0.0, 0
    for i in range(B):
        positives = [j for j in range(B) if j != i and y[j] == y[i]]
        if not positives:
            continue
        anchors += 1
        cos = [
            0.0 if norms[i] == 0 or norms[k] == 0 else float(emb[i] @ emb[k] / (norms[i] * norms[k]))
            for k in range(B)
        ]
        log_sum = math.log(sum(math.exp(cos[k] / tau) for k in range(B) if k != i))
        total += sum(-cos[j] / tau + log_sum for j in positives)
    return total / anchors if anchors else 0.0


def prox_term(local, global_snapshot, mu: float) -> torch.Tensor:
    """``(mu / 2) * ||local - global||^2`` on flat vectors or ModelParams."""
    a = _t(getattr(local, "vector", local))
    b = _t(getattr(global_snapshot, "vector", global_snapshot))
    if hasattr(local, "same_layout") and hasattr(global_snapshot, "arch"):
        if not local.same_layout(global_snapshot):
            raise ShapeError("local and global parameters have different layouts")
    if a.shape != b.shape:
        raise ShapeError(f"parameter shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    d = a - b.detach()
    return 0.5 * mu * (d * d).sum()


def multi_level_contrastive(stack, labels, config: LossConfig) -> torch.Tensor:
    """Mean of the configured contrastive loss over the selected tap levels."""
    levels = config.resolved_levels(len(stack.embeddings))
    beta = config.beta if config.mode == "ce+rcl" else 0.0
    vals = [
        contrastive_terms(stack.level(l), labels, config.tau, config.lam, beta, config.hard_mining).loss
        for l in levels
    ]
    return torch.stack(vals).mean()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    ce: torch.Tensor
    contrastive: torch.Tensor
    prox: torch.Tensor

    def detach(self) -> "LossBreakdown":
        return replace(self, **{k: v.detach() for k, v in self.__dict__.items()})

    def as_floats(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self.__dict__.items()}


def total_local_loss(stack, labels, params=None, global_snapshot=None,
                     config: LossConfig = LossConfig()) -> LossBreakdown:
    """``ce_weight * CE + contrastive_weight * contrastive + prox`` per ``config.mode``."""
    labels = _labels(labels)
    zero = stack.logits.sum() * 0.0
    ce = cross_entropy(stack.logits, labels)
    contrastive = zero
    prox = zero
    if config.contrastive and len(labels) >= 2:
        contrastive = multi_level_contrastive(stack, labels, config)
    if config.mode == "ce+prox":
        if params is None or global_snapshot is None:
            raise ConfigError("ce+prox needs both local parameters and a global snapshot")
        prox = prox_term(params, global_snapshot, config.mu)
    total = config.ce_weight * ce + config.contrastive_weight * contrastive + prox
    return LossBreakdown(total, ce, contrastive, prox)
