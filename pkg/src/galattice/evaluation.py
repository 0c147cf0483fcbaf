"""Embeddings, PCA, ROC AUC, zero-shot snapshot comparison and trajectory frame histograms."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from scipy.stats import rankdata

from . import features
from .data import CloudSet
from .heads import GalaModel
from .structures import Configuration, NeighborFinder, N_NEIGHBORS, TrajectoryFrame
from .tasks import TaskKind

PAIR_LABELS = ("L_A/L_A", "G_A/L_A", "L_A/S_A", "G_A/S_A", "L_A/L_B", "S_A/S_B")


@dataclass
class EmbeddingMatrix:
    values: np.ndarray
    source: str
    provenance: list = field(default_factory=list)

    @property
    def shape(self):
        return self.values.shape


def embed(model: GalaModel, clouds, chunk: int = 256, source: str | None = None) -> EmbeddingMatrix:
    """One invariant row per cloud: frame summary (32), latent mean (8) or mean core value (32)."""
    bonds = clouds.bonds if isinstance(clouds, CloudSet) else np.asarray(clouds, dtype=np.float64)
    rows = []
    with torch.no_grad():
        for start in range(0, len(bonds), chunk):
            rows.append(model.embed(torch.as_tensor(bonds[start : start + chunk])).numpy())
    values = np.concatenate(rows) if rows else np.zeros((0, 0))
    return EmbeddingMatrix(values, source or model.task.value)


@dataclass
class PCAResult:
    components: np.ndarray            # (n_components, d), unit rows
    projected: np.ndarray             # (n, n_components)
    explained_variance: np.ndarray
    mean: np.ndarray
    rank_deficient: bool = False
    total_variance: float = 0.0

    @property
    def explained_ratio(self) -> np.ndarray:
        total = self.total_variance
        return self.explained_variance / total if total > 0 else np.zeros_like(self.explained_variance)


def pca(matrix, n_components: int = 2) -> PCAResult:
    """Principal components by SVD of the centered rows; largest-magnitude loading positive."""
    x = np.asarray(getattr(matrix, "values", matrix), dtype=np.float64)
    n, d = x.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 rows")
    if n_components > d:
        raise ValueError(f"n_components = {n_components} exceeds dimension {d}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    variance = s**2 / (n - 1)
    components = np.zeros((n_components, d))
    var = np.zeros(n_components)
    m = min(n_components, len(s))
    components[:m], var[:m] = vt[:m], variance[:m]
    pivot = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(n_components), pivot])
    signs[signs == 0] = 1.0
    components *= signs[:, None]
    tol = max(n, d) * np.finfo(float).eps * (s[0] if len(s) else 0.0)
    rank = int(np.sum(s > tol))
    return PCAResult(components, centered @ components.T, var, mean, rank < n_components,
                     total_variance=float(np.sum(variance)))


@dataclass
class RocResult:
    auc: float
    raw: float
    n_a: int
    n_b: int


def roc_auc(scores_a, scores_b) -> RocResult:
    """Mann-Whitney AUC: probability that a B score exceeds an A score, ties count 1/2."""
    a = np.asarray(scores_a, dtype=np.float64).ravel()
    b = np.asarray(scores_b, dtype=np.float64).ravel()
    if len(a) == 0 or len(b) == 0:
        raise ValueError("roc_auc needs non-empty score lists")
    ranks = rankdata(np.concatenate([a, b]), method="average")
    u = ranks[len(a):].sum() - len(b) * (len(b) + 1) / 2.0
    raw = float(u / (len(a) * len(b)))
    return RocResult(max(raw, 1.0 - raw), raw, len(a), len(b))


@dataclass
class SnapshotPair:
    label: str
    a: Configuration
    b: Configuration

    def __post_init__(self):
        if self.a.n == 0 or self.b.n == 0:
            raise ValueError(f"{self.label}: snapshots must be non-empty")


def snapshot_clouds(config: Configuration, k: int = N_NEIGHBORS) -> np.ndarray:
    return NeighborFinder(config).all_clouds(k)


Featurizer = Callable[[np.ndarray], np.ndarray]


def learned_featurizer(model: GalaModel) -> Featurizer:
    return lambda clouds: embed(model, clouds).values


def baseline_featurizer(method: str) -> Featurizer:
    return lambda clouds: features.featurize(method, clouds)


def zero_shot_scores(featurize: Featurizer, clouds_a: np.ndarray, clouds_b: np.ndarray):
    """First-PC scores of the jointly fitted PCA, split back into the two populations."""
    rows = featurize(np.concatenate([clouds_a, clouds_b]))
    proj = pca(rows, 1).projected[:, 0]
    return proj[: len(clouds_a)], proj[len(clouds_a):]


def zero_shot_pair(featurize: Featurizer, pair: SnapshotPair, k: int = N_NEIGHBORS) -> RocResult:
    sa, sb = zero_shot_scores(featurize, snapshot_clouds(pair.a, k), snapshot_clouds(pair.b, k))
    return roc_auc(sa, sb)


def write_auc_csv(path, rows) -> None:
    """rows: (pair label, method, RocResult)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair", "method", "auc", "raw_auc", "n_a", "n_b"])
        for label, method, r in rows:
            w.writerow([label, method, repr(r.auc), repr(r.raw), r.n_a, r.n_b])


# --- trajectory phase identification -----------------------------------------

def trajectory_classes(frames: list[TrajectoryFrame], stride: int = 4) -> tuple[list[int], list[int]]:
    """(training frame positions, held-out frame positions) for every ``stride``-th frame training."""
    train = list(range(0, len(frames), stride))
    held = [i for i in range(len(frames)) if i % stride]
    return train, held


def frame_bin(position: int, stride: int = 4) -> int:
    """Class of a frame: index of the nearest preceding training frame."""
    return position // stride


def trajectory_cloudset(frames: list[TrajectoryFrame], stride: int = 4, k: int = N_NEIGHBORS,
                        per_frame: int | None = None, seed: int = 0) -> CloudSet:
    """Clouds from the training frames, labelled by training-frame class."""
    train, _ = trajectory_classes(frames, stride)
    rng = np.random.default_rng(seed)
    bonds, classes = [], []
    for c, pos in enumerate(train):
        config = frames[pos].config
        centers = None
        if per_frame is not None and per_frame < config.n:
            centers = np.sort(rng.choice(config.n, per_frame, replace=False))
        clouds = NeighborFinder(config).all_clouds(k, centers)
        bonds.append(clouds)
        classes.append(np.full(len(clouds), c))
    names = [f"frame{frames[p].index}" for p in train]
    return CloudSet(np.concatenate(bonds), np.concatenate(classes), names, {"stride": stride})


def frame_histogram(model: GalaModel, frames: list[TrajectoryFrame], stride: int = 4,
                    k: int = N_NEIGHBORS, positions=None, chunk: int = 256) -> tuple[np.ndarray, list[int]]:
    """Counts of per-particle predicted classes for each evaluation frame.

    Evaluation frames default to the held-out ones. Returns (matrix, frame positions).
    """
    if model.task is not TaskKind.FRAME:
        raise ValueError("phase histograms need a frame-classification model")
    n_classes = len(trajectory_classes(frames, stride)[0])
    if model.n_classes != n_classes:
        raise ValueError(f"classifier has {model.n_classes} classes, trajectory gives {n_classes} training frames")
    positions = trajectory_classes(frames, stride)[1] if positions is None else list(positions)
    hist = np.zeros((len(positions), n_classes), dtype=np.int64)
    for row, pos in enumerate(positions):
        clouds = NeighborFinder(frames[pos].config).all_clouds(k)
        with torch.no_grad():
            for start in range(0, len(clouds), chunk):
                logits = model(torch.as_tensor(clouds[start : start + chunk]))["pred"]
                hist[row] += np.bincount(torch.argmax(logits, dim=-1).numpy(), minlength=n_classes)
    return hist, positions


def write_histogram_csv(path, hist: np.ndarray, positions, frames=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "tag"] + [f"class{j}" for j in range(hist.shape[1])])
        for pos, row in zip(positions, hist):
            tag = "" if frames is None or frames[pos].tag is None else repr(frames[pos].tag)
            index = pos if frames is None else frames[pos].index
            w.writerow([index, tag] + [int(x) for x in row])
