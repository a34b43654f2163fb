"""Feature-space diagnostics: deviation bound, collapse metrics, bound checks.

Everything here is plain numpy over (M, d) feature matrices, except the
classifier-update check which uses autograd as its reference gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeError, UndefinedMetricError

RANK_RCOND = 1e-10


def cosine_matrix(features) -> np.ndarray:
    """Pairwise cosine similarities; zero-norm rows are similar to nothing."""
    X = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    Z = np.divide(X, norms[:, None], out=np.zeros_like(X), where=norms[:, None] > 0)
    return Z @ Z.T


def _num_classes(labels, num_classes):
    return int(num_classes if num_classes is not None else np.max(labels) + 1)


# ---------------------------------------------------------------------------
# Class statistics and the sample-wise deviation bound
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassStats:
    sizes: np.ndarray        # |O_y|
    mean_norms: np.ndarray   # Phi_y
    pred_means: np.ndarray   # pred_means[y, z] = P_z^(y); NaN rows for absent classes
    present: np.ndarray      # bool mask of classes with >= 1 sample

    @property
    def num_classes(self) -> int:
        return len(self.sizes)


def class_statistics(features, predictions, labels, num_classes: int | None = None) -> ClassStats:
    X = np.asarray(features, dtype=np.float64)
    P = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels)
    Q = _num_classes(y, num_classes)
    sizes = np.bincount(y, minlength=Q)
    present = sizes > 0
    norms = np.linalg.norm(X, axis=1)
    mean_norms = np.zeros(Q)
    pred_means = np.full((Q, P.shape[1]), np.nan)
    for c in np.nonzero(present)[0]:
        mask = y == c
        mean_norms[c] = norms[mask].mean()
        pred_means[c] = P[mask].mean(axis=0)
    return ClassStats(sizes, mean_norms, pred_means, present)


def class_similarities(features, labels, num_classes: int | None = None) -> np.ndarray:
    """``S[i, y]``: mean cosine similarity of sample i to the samples of class y."""
    y = np.asarray(labels)
    Q = _num_classes(y, num_classes)
    C = cosine_matrix(features)
    onehot = np.eye(Q)[y]
    sizes = onehot.sum(axis=0)
    return np.divide(C @ onehot, sizes, out=np.full((len(y), Q), np.nan), where=sizes > 0)


def _deviation(r, S_row, stats: ClassStats) -> tuple[float, bool]:
    P = stats.pred_means
    weight = stats.mean_norms * stats.sizes
    num = (1.0 - P[r, r]) * weight[r] * S_row[r]
    others = [j for j in np.nonzero(stats.present)[0] if j != r]
    den = sum(P[j, r] * weight[j] * S_row[j] for j in others)
    if not den > 0:
        return math.inf, True
    return float(num / den), False


def deviation_bound(index: int, features, labels, stats: ClassStats) -> float:
    """Sample-wise deviation bound D(x) of sample ``index``; +inf if the denominator is not positive."""
    y = np.asarray(labels)
    S = class_similarities(features, y, stats.num_classes)
    return _deviation(int(y[index]), S[index], stats)[0]


@dataclass(frozen=True)
class DeviationReport:
    values: np.ndarray         # D(x) per sample, +inf sentinel where undefined
    similarities: np.ndarray   # S_y(x), shape (M, Q)
    undefined: np.ndarray      # bool mask of sentinel entries

    @property
    def mean(self) -> float:
        finite = self.values[~self.undefined]
        return float(finite.mean()) if finite.size else math.nan

    @property
    def min(self) -> float:
        return float(self.values.min())

    @property
    def fraction_below_one(self) -> float:
        return float(np.mean(self.values < 1.0))

    def summary(self) -> dict:
        return {
            "mean": self.mean,
            "min": self.min,
            "fraction_below_one": self.fraction_below_one,
            "undefined": int(self.undefined.sum()),
        }


def deviation_report(features, predictions, labels, num_classes: int | None = None) -> DeviationReport:
    y = np.asarray(labels)
    stats = class_statistics(features, predictions, y, num_classes)
    S = class_similarities(features, y, stats.num_classes)
    out = [_deviation(int(r), S[i], stats) for i, r in enumerate(y)]
    values = np.array([v for v, _ in out])
    return DeviationReport(values, S, np.array([u for _, u in out], dtype=bool))


# ---------------------------------------------------------------------------
# Classifier update decomposition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UpdateCheck:
    delta_psi: np.ndarray
    residual: float
    sum_norm: float


def classifier_update_check(features, labels, psi, eta: float) -> UpdateCheck:
    """Compare the per-class update decomposition of a bias-free softmax head
    against ``-eta`` times the autograd gradient of the summed cross-entropy."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    W = np.asarray(psi, dtype=np.float64)
    Q = W.shape[0]
    logits = X @ W.T
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)

    delta = np.zeros_like(W)
    for r in range(Q):
        own = y == r
        delta[r] = eta * ((1.0 - p[own, r]) @ X[own] - p[~own, r] @ X[~own])

    Wt = torch.tensor(W, requires_grad=True)
    loss = torch.nn.functional.cross_entropy(torch.tensor(X) @ Wt.T, torch.as_tensor(y), reduction="sum")
    (g,) = torch.autograd.grad(loss, Wt)
    residual = float(np.abs(delta + eta * g.numpy()).max())
    return UpdateCheck(delta, residual, float(np.linalg.norm(delta.sum(axis=0))))


# ---------------------------------------------------------------------------
# Collapse metrics
# ---------------------------------------------------------------------------

def effective_rank(matrix) -> float:
    """exp of the Shannon entropy of the normalized singular values."""
    s = np.abs(np.linalg.svd(np.atleast_2d(np.asarray(matrix, dtype=np.float64)), compute_uv=False))
    total = s.sum()
    if total == 0:
        raise UndefinedMetricError("effective rank of an all-zero matrix is undefined")
    p = s[s > 0] / total
    return float(math.exp(-(p * np.log(p)).sum()))


@dataclass(frozen=True)
class CovarianceDecomposition:
    within: np.ndarray
    between: np.ndarray
    total: np.ndarray
    single_class: bool

    @property
    def trace_within(self) -> float:
        return float(np.trace(self.within))

    @property
    def trace_between(self) -> float:
        return float(np.trace(self.between))

    @property
    def trace_total(self) -> float:
        return float(np.trace(self.total))


def covariance_decomposition(features, labels) -> CovarianceDecomposition:
    """Population (1/M) covariances, so that total = within + between exactly."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    M, d = X.shape
    mu = X.mean(axis=0)
    within = np.zeros((d, d))
    between = np.zeros((d, d))
    classes = np.unique(y)
    for c in classes:
        Xc = X[y == c]
        mc = Xc.mean(axis=0)
        D = Xc - mc
        within += D.T @ D
        between += len(Xc) * np.outer(mc - mu, mc - mu)
    T = X - mu
    return CovarianceDecomposition(within / M, between / M, T.T @ T / M, len(classes) < 2)


def _numerical_rank(s: np.ndarray, rcond: float) -> int:
    return int((s > rcond * s.max()).sum()) if s.size and s.max() > 0 else 0


def vci(features, labels, rcond: float = RANK_RCOND) -> float:
    """Variability collapse index ``1 - Tr[pinv(Sigma_T) Sigma_B] / rank(Sigma_B)``."""
    return vci_from_decomposition(covariance_decomposition(features, labels), rcond)


def vci_from_decomposition(dec: CovarianceDecomposition, rcond: float = RANK_RCOND) -> float:
    rank_b = _numerical_rank(np.linalg.svd(dec.between, compute_uv=False), rcond)
    if rank_b == 0:
        raise UndefinedMetricError("VCI is undefined when the between-class covariance has rank 0")
    value = 1.0 - np.trace(np.linalg.pinv(dec.total, rcond=rcond, hermitian=True) @ dec.between) / rank_b
    if -1e-9 <= value < 0:
        value = 0.0
    elif 1 < value <= 1 + 1e-9:
        value = 1.0
    return float(value)


@dataclass(frozen=True)
class CollapseMetrics:
    trace_within: float
    trace_between: float
    trace_total: float
    effective_rank: float | None
    vci: float | None


def collapse_metrics(features, labels) -> CollapseMetrics:
    """Covariance traces, effective rank of the total covariance, and VCI.

    Undefined metrics (all-zero covariance, rank-0 between-class part) are None.
    """
    dec = covariance_decomposition(features, labels)
    try:
        erank = effective_rank(dec.total)
    except UndefinedMetricError:
        erank = None
    try:
        v = vci_from_decomposition(dec)
    except UndefinedMetricError:
        v = None
    return CollapseMetrics(dec.trace_within, dec.trace_between, dec.trace_total, erank, v)


# ---------------------------------------------------------------------------
# Upper-bound chain relating the surrogate objective to the SCL form
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainReport:
    hinge: float      # max(0, mean_j S_j - S_r)
    softplus: float   # log(1 + exp(mean_j S_j - S_r))
    scl_bound: float  # per-anchor SCL form averaged over the anchor's positives

    @property
    def hinge_le_softplus(self) -> bool:
        return self.hinge <= self.softplus + 1e-9

    @property
    def softplus_le_scl(self) -> bool:
        return self.softplus <= self.scl_bound + 1e-9

    @property
    def holds(self) -> bool:
        return self.hinge_le_softplus and self.softplus_le_scl


def inequality_chain_check(features, labels, anchor: int) -> ChainReport:
    """Evaluate the three quantities of the hinge -> LogSumExp -> SCL bound chain
    for one anchor, using unit-temperature cosine similarities."""
    y = np.asarray(labels)
    r = y[anchor]
    own = np.nonzero(y == r)[0]
    if len(own) < 2:
        raise ShapeError("the anchor's class needs at least 2 samples")
    others = [c for c in np.unique(y) if c != r]
    if not others:
        raise ShapeError("at least one other class is required")
    sim = cosine_matrix(features)[anchor]
    S_r = sim[own].mean()
    mean_other = np.mean([sim[y == c].mean() for c in others])
    gap = mean_other - S_r

    rest = np.arange(len(y)) != anchor
    log_denom = np.log(np.exp(sim[rest]).sum())
    positives = own[own != anchor]
    scl = -np.mean(sim[positives] - log_denom)
    return ChainReport(max(0.0, gap), float(np.logaddexp(0.0, gap)), float(scl))
