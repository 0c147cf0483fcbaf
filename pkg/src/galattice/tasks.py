"""Self-supervised task definitions: sample construction, losses and metrics."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch

from . import autodiff as ad

PERTURBATION_STD = 0.5


class TaskKind(str, enum.Enum):
    AUTOENCODER = "autoencoder"
    DENOISING = "denoising"
    FRAME = "frame"
    SHIFT = "shift"
    NOISY_BOND = "noisy_bond"
    NEAREST_BOND = "nearest_bond"

    @classmethod
    def parse(cls, value) -> "TaskKind":
        if isinstance(value, cls):
            return value
        aliases = {"noisy": "noisy_bond", "nearest": "nearest_bond", "ae": "autoencoder"}
        key = str(value).lower().replace("-", "_")
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown task id {value!r}") from None

    @property
    def is_classification(self) -> bool:
        return self in (TaskKind.FRAME, TaskKind.NOISY_BOND)

    @property
    def is_dynamic(self) -> bool:
        """Dynamic tasks draw fresh perturbations every epoch."""
        return self in (TaskKind.DENOISING, TaskKind.NOISY_BOND, TaskKind.SHIFT)


@dataclass
class PointCloud:
    """Neighbor-relative bond vectors of one particle (center at the origin)."""

    bonds: np.ndarray
    types: np.ndarray = None

    def __post_init__(self):
        self.bonds = np.asarray(self.bonds, dtype=np.float64)
        if self.bonds.ndim != 2 or self.bonds.shape[1] != 3:
            raise ValueError(f"bonds must be (k, 3), got {self.bonds.shape}")
        if self.types is None:
            self.types = np.zeros(len(self.bonds), dtype=np.int64)
        self.types = np.asarray(self.types, dtype=np.int64)
        if len(self.types) != len(self.bonds):
            raise ValueError("one type index per bond is required")
        if not np.all(np.isfinite(self.bonds)):
            raise ValueError("bond vectors must be finite")

    @property
    def k(self) -> int:
        return len(self.bonds)


@dataclass
class TaskSample:
    kind: TaskKind
    input: PointCloud
    label: Any
    record: dict = field(default_factory=dict)


def best_fit_rotation(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Proper rotation R minimising sum |R s - t|^2 over centered point sets."""
    s = source - source.mean(axis=0)
    t = target - target.mean(axis=0)
    u, _, vt = np.linalg.svd(s.T @ t)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    return vt.T @ np.diag([1.0, 1.0, d]) @ u.T


def make_sample(kind, cloud: PointCloud, context: Any = None,
                rng: np.random.Generator | None = None, std: float = PERTURBATION_STD) -> TaskSample:
    """Build one (input, label) pair; ``context`` is the class index for FRAME."""
    kind = TaskKind.parse(kind)
    rng = rng if rng is not None else np.random.default_rng()
    bonds = cloud.bonds
    k = cloud.k
    minimum = {TaskKind.NEAREST_BOND: 3, TaskKind.NOISY_BOND: 2}.get(kind, 1)
    if k < minimum:
        raise ValueError(f"{kind.value} needs at least {minimum} bonds, got {k}")

    if kind is TaskKind.AUTOENCODER:
        return TaskSample(kind, cloud, sort_by_distance(bonds))

    if kind is TaskKind.DENOISING:
        if std == 0:
            return TaskSample(kind, PointCloud(bonds.copy(), cloud.types), bonds.copy())
        noisy = bonds + rng.normal(scale=std, size=bonds.shape)
        noisy -= (noisy - bonds).mean(axis=0)
        center = bonds.mean(axis=0)
        rot = best_fit_rotation(noisy, bonds)
        noisy = center + (noisy - center) @ rot.T
        return TaskSample(kind, PointCloud(noisy, cloud.types), bonds.copy())

    if kind is TaskKind.FRAME:
        if context is None:
            raise ValueError("frame classification needs a class index as context")
        return TaskSample(kind, cloud, int(context))

    if kind is TaskKind.SHIFT:
        shift = rng.normal(scale=std, size=3)
        return TaskSample(kind, PointCloud(bonds + shift, cloud.types), shift, {"original": bonds})

    if kind is TaskKind.NOISY_BOND:
        chosen = rng.choice(k, size=k // 2, replace=False)
        flags = np.zeros(k, dtype=np.int64)
        flags[chosen] = 1
        noisy = bonds.copy()
        noisy[chosen] += rng.normal(scale=std, size=(len(chosen), 3))
        return TaskSample(kind, PointCloud(noisy, cloud.types), flags)

    # nearest bond
    lengths = np.linalg.norm(bonds, axis=1)
    nearest = int(np.lexsort((np.arange(k), lengths))[0])
    keep = np.arange(k) != nearest
    return TaskSample(kind, PointCloud(bonds[keep], cloud.types[keep]), bonds[nearest].copy())


def sort_by_distance(bonds: np.ndarray) -> np.ndarray:
    """Bonds reordered by ascending length, ties by original index."""
    lengths = np.linalg.norm(bonds, axis=-1)
    order = np.lexsort((np.arange(len(bonds)), lengths))
    return bonds[order].copy()


def orientation_bottleneck(v1, v2) -> np.ndarray:
    """Right-handed orthonormal basis (rows) from two vectors by Gram-Schmidt."""
    out = orientation_basis(torch.as_tensor(np.asarray(v1, dtype=np.float64)),
                            torch.as_tensor(np.asarray(v2, dtype=np.float64)))
    return out.numpy()


def orientation_basis(v1: torch.Tensor, v2: torch.Tensor, tol: float = 1e-8) -> torch.Tensor:
    """Batched version: (..., 3) x2 -> (..., 3, 3) with basis vectors as rows."""
    n1 = torch.linalg.vector_norm(v1, dim=-1, keepdim=True)
    if bool(torch.any(n1 <= tol)):
        raise ValueError("degenerate orientation input: first vector vanishes")
    b1 = v1 / n1
    ortho = v2 - (v2 * b1).sum(-1, keepdim=True) * b1
    n2 = torch.linalg.vector_norm(ortho, dim=-1, keepdim=True)
    if bool(torch.any(n2 <= tol)):
        raise ValueError("degenerate orientation input: vectors are parallel")
    b2 = ortho / n2
    b3 = torch.linalg.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-2)


# --- losses and metrics -------------------------------------------------------

def task_loss(kind, prediction: dict | torch.Tensor, label: torch.Tensor,
              beta: float = 1e-2, reduction: str = "mean") -> torch.Tensor:
    """Training loss; ``prediction`` is a model output dict or a bare tensor."""
    kind = TaskKind.parse(kind)
    pred = prediction["pred"] if isinstance(prediction, dict) else prediction
    if kind.is_classification:
        expected = label.shape + (pred.shape[-1],)
        if tuple(pred.shape) != tuple(expected):
            raise ValueError(f"{kind.value}: logits {tuple(pred.shape)} do not match labels {tuple(label.shape)}")
        return ad.cross_entropy(pred, label, reduction=reduction)
    if tuple(pred.shape) != tuple(label.shape):
        raise ValueError(f"{kind.value}: prediction {tuple(pred.shape)} != label {tuple(label.shape)}")
    loss = ad.mse(pred, label, reduction=reduction)
    if kind is TaskKind.AUTOENCODER and isinstance(prediction, dict) and beta:
        loss = loss + beta * ad.gaussian_kl(prediction["mu"], prediction["logvar"], reduction=reduction)
    return loss


def validation_metric(kind, predictions, labels) -> float:
    """Mean absolute error (geometric tasks) or 1 - accuracy; lower is better."""
    kind = TaskKind.parse(kind)
    pred = torch.as_tensor(predictions)
    lab = torch.as_tensor(labels)
    if pred.numel() == 0 or lab.numel() == 0:
        raise ValueError("validation_metric needs a non-empty evaluation set")
    if kind.is_classification:
        # torch.argmax returns the first maximal index
        guess = torch.argmax(pred, dim=-1)
        return float(1.0 - (guess == lab).double().mean())
    return float(torch.mean(torch.abs(pred - lab)))


def metric_sums(kind, prediction: torch.Tensor, label: torch.Tensor) -> tuple[float, int]:
    """(sum, count) pieces of :func:`validation_metric` for streaming evaluation."""
    kind = TaskKind.parse(kind)
    if kind.is_classification:
        wrong = (torch.argmax(prediction, dim=-1) != label).double()
        return float(wrong.sum()), wrong.numel()
    err = torch.abs(prediction - label)
    return float(err.sum()), err.numel()
