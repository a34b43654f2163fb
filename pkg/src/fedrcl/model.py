"""Layered feature extractor with per-stage taps and a bias-free linear head.

Each stage is ``linear/conv -> group norm -> ReLU``. The output of every
stage is tapped (spatial maps reduced by global average pooling), so a
network with L stages yields L embeddings plus the classifier logits.

All parameters live in one flat float64 vector; segments are views into it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint
from .errors import ConfigError, NumericalError, ShapeError

GN_EPS = 1e-5
DTYPE = torch.float64


@dataclass(frozen=True)
class ArchConfig:
    input_shape: tuple[int, ...]
    widths: tuple[int, ...]
    num_classes: int
    groups: int | None = None
    reduction: str = "gap"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.input_shape) not in (1, 3):
            raise ConfigError(f"input_shape must be (F,) or (C, H, W), got {self.input_shape}")
        if not self.widths:
            raise ConfigError("at least one stage width is required")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.reduction != "gap":
            raise ConfigError(f"unsupported embedding reduction {self.reduction!r}")
        for w in self.widths:
            g = self.groups_for(w)
            if w % g:
                raise ConfigError(f"stage width {w} is not divisible by {g} groups")
            if not self.is_conv and w == g:
                # one unit per group normalizes to exactly zero
                raise ConfigError(f"dense stage width {w} with {g} groups leaves one unit per group")

    @property
    def num_levels(self) -> int:
        return len(self.widths)

    @property
    def is_conv(self) -> bool:
        return len(self.input_shape) == 3

    def groups_for(self, width: int) -> int:
        return self.groups if self.groups is not None else min(8, width)

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        segs = []
        fan_in = self.input_shape[0]
        for l, w in enumerate(self.widths, start=1):
            shape = (w, fan_in, 3, 3) if self.is_conv else (w, fan_in)
            segs += [(f"stage{l}.weight", shape), (f"stage{l}.gn_weight", (w,)), (f"stage{l}.gn_bias", (w,))]
            fan_in = w
        segs.append(("classifier", (self.num_classes, self.widths[-1])))
        return tuple(segs)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ModelParams:
    """Flat parameter vector theta = [phi; psi] plus its segment layout."""

    arch: ArchConfig
    vector: np.ndarray = field(repr=False)

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64)
        expected = sum(math.prod(s) for _, s in self.arch.layout())
        if vec.shape != (expected,):
            raise ShapeError(f"parameter vector has shape {vec.shape}, layout needs ({expected},)")
        if not np.all(np.isfinite(vec)):
            raise NumericalError("parameter vector has non-finite entries", {"count": int((~np.isfinite(vec)).sum())})
        object.__setattr__(self, "vector", vec)

    @property
    def size(self) -> int:
        return self.vector.size

    def segments(self) -> dict[str, np.ndarray]:
        return _split(self.vector, self.arch)

    def segment(self, name: str) -> np.ndarray:
        return self.segments()[name]

    def with_vector(self, vector) -> "ModelParams":
        return ModelParams(self.arch, np.asarray(vector, dtype=np.float64))

    def same_layout(self, other: "ModelParams") -> bool:
        return self.arch.layout() == other.arch.layout()


def _split(vector, arch: ArchConfig) -> dict:
    out, offset = {}, 0
    for name, shape in arch.layout():
        n = math.prod(shape)
        out[name] = vector[offset:offset + n].reshape(shape)
        offset += n
    return out


@dataclass
class FeatureStack:
    embeddings: list[torch.Tensor]
    logits: torch.Tensor

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=1)

    def level(self, l: int) -> torch.Tensor:
        """Embedding at 1-based tap level ``l``."""
        if not 1 <= l <= len(self.embeddings):
            raise ShapeError(f"level {l} not in 1..{len(self.embeddings)}")
        return self.embeddings[l - 1]


def init_model(arch: ArchConfig, seed: int = 0) -> ModelParams:
    """He-normal stage weights, unit/zero group-norm affine, zero-mean head."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in arch.layout():
        if name.endswith("gn_weight"):
            parts.append(np.ones(shape))
        elif name.endswith("gn_bias"):
            parts.append(np.zeros(shape))
        elif name == "classifier":
            parts.append(rng.standard_normal(shape) / math.sqrt(shape[1]))
        else:
            fan_in = math.prod(shape[1:])
            parts.append(rng.standard_normal(shape) * math.sqrt(2.0 / fan_in))
    return ModelParams(arch, np.concatenate([p.ravel() for p in parts]))


def group_norm(x: torch.Tensor, groups: int, weight=None, bias=None) -> torch.Tensor:
    return F.group_norm(x, groups, weight, bias, eps=GN_EPS)


def forward_tensor(theta: torch.Tensor, arch: ArchConfig, x: torch.Tensor, preacts: list | None = None) -> FeatureStack:
    """Differentiable forward pass on a flat parameter tensor.

    If ``preacts`` is given, each stage's pre-ReLU output is appended to it.
    """
    if tuple(x.shape[1:]) != arch.input_shape:
        raise ShapeError(f"batch has sample shape {tuple(x.shape[1:])}, arch expects {arch.input_shape}")
    seg = _split(theta, arch)
    h = x
    taps = []
    for l, w in enumerate(arch.widths, start=1):
        W = seg[f"stage{l}.weight"]
        if arch.is_conv:
            h = F.conv2d(h, W, stride=1 if l == 1 else 2, padding=1)
        else:
            h = h @ W.T
        h = group_norm(h, arch.groups_for(w), seg[f"stage{l}.gn_weight"], seg[f"stage{l}.gn_bias"])
        if preacts is not None:
            preacts.append(h)
        h = torch.relu(h)
        taps.append(h.mean(dim=(2, 3)) if arch.is_conv else h)
    logits = taps[-1] @ seg["classifier"].T
    return FeatureStack(taps, logits)


def _as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a.to(DTYPE)
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def forward(params: ModelParams, batch) -> FeatureStack:
    with torch.no_grad():
        return forward_tensor(_as_tensor(params.vector), params.arch, _as_tensor(batch))


def loss_and_grad_tensor(theta, arch, x, y, loss_config, global_theta=None):
    """Composite local loss and its gradient w.r.t. the flat parameter tensor.

    Returns ``(LossBreakdown, grad)``; raises NumericalError on a
    non-finite loss.
    """
    from .losses import total_local_loss

    theta = theta.detach().requires_grad_(True)
    stack = forward_tensor(theta, arch, x)
    parts = total_local_loss(stack, y, theta, global_theta, loss_config)
    if not torch.isfinite(parts.total):
        raise NumericalError("non-finite local loss", parts.as_floats())
    if parts.total.requires_grad:
        (g,) = torch.autograd.grad(parts.total, theta)
    else:
        g = torch.zeros_like(theta)
    return parts.detach(), g


def grad(params: ModelParams, batch, labels, loss_config, global_snapshot: ModelParams | None = None) -> np.ndarray:
    """Gradient of the composite local loss, laid out like ``params.vector``."""
    glob = None if global_snapshot is None else _as_tensor(global_snapshot.vector)
    _, g = loss_and_grad_tensor(
        _as_tensor(params.vector), params.arch, _as_tensor(batch),
        torch.as_tensor(np.asarray(labels), dtype=torch.long), loss_config, glob,
    )
    return g.numpy().copy()


def loss_value(params: ModelParams, batch, labels, loss_config, global_snapshot: ModelParams | None = None) -> float:
    from .losses import total_local_loss

    theta = _as_tensor(params.vector)
    glob = None if global_snapshot is None else _as_tensor(global_snapshot.vector)
    with torch.no_grad():
        stack = forward_tensor(theta, params.arch, _as_tensor(batch))
        parts = total_local_loss(stack, torch.as_tensor(np.asarray(labels), dtype=torch.long), theta, glob, loss_config)
    return float(parts.total)


def predict(params: ModelParams, batch, batch_size: int = 1024) -> np.ndarray:
    batch = np.asarray(batch)
    out = []
    for i in range(0, len(batch), batch_size):
        out.append(forward(params, batch[i:i + batch_size]).logits.argmax(dim=1).numpy())
    return np.concatenate(out)


def accuracy(params: ModelParams, samples, labels) -> float:
    return float(np.mean(predict(params, samples) == np.asarray(labels)))


def save_params(params: ModelParams, path, meta: dict | None = None) -> None:
    """Write a checkpoint with one array per named segment."""
    arrays = {name: seg for name, seg in params.segments().items()}
    checkpoint.write_arrays(path, arrays, {"arch": params.arch.to_dict(), **(meta or {})})


def load_params(path) -> tuple[ModelParams, dict]:
    arrays, meta = checkpoint.read_arrays(path)
    arch = arch_from_dict(meta.pop("arch"))
    names = [n for n, _ in arch.layout()]
    if list(arrays) != names:
        raise ShapeError(f"checkpoint segments {list(arrays)} do not match arch layout {names}")
    return ModelParams(arch, np.concatenate([arrays[n].ravel() for n in names])), meta


def arch_from_dict(d: dict) -> ArchConfig:
    return ArchConfig(
        input_shape=tuple(d["input_shape"]),
        widths=tuple(d["widths"]),
        num_classes=d["num_classes"],
        groups=d.get("groups"),
        reduction=d.get("reduction", "gap"),
    )


def preactivations(params: ModelParams, batch) -> list[np.ndarray]:
    """Group-normalized stage outputs before the ReLU, one array per stage."""
    collected: list[torch.Tensor] = []
    with torch.no_grad():
        forward_tensor(_as_tensor(params.vector), params.arch, _as_tensor(batch), preacts=collected)
    return [t.numpy() for t in collected]


__all__: Sequence[str] = (
    "ArchConfig", "ModelParams", "FeatureStack", "init_model", "forward", "forward_tensor",
    "grad", "loss_value", "loss_and_grad_tensor", "predict", "accuracy", "save_params", "load_params",
    "preactivations",
)
