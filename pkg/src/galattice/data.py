"""Cloud datasets for the self-supervised tasks and their on-disk format.

A dataset directory holds ``manifest.txt`` (``key = value`` lines) plus one
``<name>.f64`` file per array: an ASCII shape line followed by little-endian
float64 values.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .structures import (
    N_NEIGHBORS, NOISE_LEVELS, MIN_PARTICLES, NeighborFinder, add_thermal_noise, build_prototype,
    derive_seed, load_structure, replicate,
)
from .tasks import PointCloud, TaskKind, make_sample

VAL_FRACTION = 0.3
MANIFEST_VERSION = 1


@dataclass
class CloudSet:
    """Raw neighbor clouds with their structure class and provenance."""

    bonds: np.ndarray                  # (n, k, 3)
    classes: np.ndarray                # (n,) structure class index
    class_names: list[str]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bonds = np.asarray(self.bonds, dtype=np.float64)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        if self.bonds.ndim != 3 or self.bonds.shape[2] != 3 or len(self.classes) != len(self.bonds):
            raise ValueError("bonds must be (n, k, 3) with one class per cloud")

    def __len__(self):
        return len(self.bonds)

    def subset(self, index) -> "CloudSet":
        index = np.asarray(index, dtype=np.int64)
        return CloudSet(self.bonds[index], self.classes[index], list(self.class_names), dict(self.provenance))


def _cell(name: str):
    path = Path(name)
    return load_structure(path) if path.suffix and path.exists() else build_prototype(name)


def prototype_clouds(prototypes, clouds_per_class: int, noise_levels=NOISE_LEVELS, seed: int = 0,
                     k: int = N_NEIGHBORS, min_particles: int = MIN_PARTICLES) -> CloudSet:
    """Clouds drawn evenly over noise levels from noisy supercells of each prototype.

    ``prototypes`` holds built-in names or structure-file paths. Each (prototype,
    noise level) pair gets its own supercell realisation and particle choice,
    seeded from the global seed and the labels.
    """
    names, bonds, classes = [], [], []
    for c, proto in enumerate(prototypes):
        cell = _cell(proto)
        names.append(cell.name)
        base = replicate(cell, min_particles)
        per_level = np.full(len(noise_levels), clouds_per_class // len(noise_levels))
        per_level[: clouds_per_class % len(noise_levels)] += 1
        for level, count in zip(noise_levels, per_level):
            if count == 0:
                continue
            draws, replica = [], 0
            while sum(len(d) for d in draws) < count:
                s = derive_seed(seed, cell.name, float(level), replica)
                config = add_thermal_noise(base, float(level), s)
                rng = np.random.default_rng(s + 1)
                need = min(count - sum(len(d) for d in draws), config.n)
                centers = np.sort(rng.choice(config.n, size=need, replace=False))
                draws.append(NeighborFinder(config).all_clouds(k, centers))
                replica += 1
            bonds.append(np.concatenate(draws))
            classes.append(np.full(count, c))
    prov = {"prototypes": ",".join(names), "noise_levels": ",".join(f"{x!r}" for x in noise_levels),
            "clouds_per_class": clouds_per_class, "seed": seed, "k": k}
    return CloudSet(np.concatenate(bonds), np.concatenate(classes), names, prov)


def split_indices(n: int, seed: int, val_fraction: float = VAL_FRACTION) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint (train, val) index arrays; val gets round(val_fraction * n) clouds."""
    perm = np.random.default_rng(derive_seed(seed, "split")).permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def subsample(n: int, fraction: float, seed) -> np.ndarray:
    """max(1, floor(fraction * n)) indices drawn uniformly without replacement."""
    size = max(1, int(np.floor(fraction * n + 1e-9)))
    size = min(size, n)
    return np.sort(np.random.default_rng(seed).choice(n, size=size, replace=False))


# --- task samples -------------------------------------------------------------

@dataclass
class TaskBatch:
    """Stacked model inputs and labels for one task."""

    kind: TaskKind
    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.inputs)

    def take(self, index) -> "TaskBatch":
        return TaskBatch(self.kind, self.inputs[index], self.labels[index])


def make_samples(kind, clouds: CloudSet, seed) -> TaskBatch:
    """Apply the task recipe to every cloud with one seeded stream."""
    kind = TaskKind.parse(kind)
    rng = np.random.default_rng(seed)
    inputs, labels = [], []
    for bonds, cls in zip(clouds.bonds, clouds.classes):
        sample = make_sample(kind, PointCloud(bonds), context=cls, rng=rng)
        inputs.append(sample.input.bonds)
        labels.append(sample.label)
    return TaskBatch(kind, np.stack(inputs), np.asarray(labels))


# --- binary arrays and manifests ------------------------------------------------

def write_array(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(("shape " + " ".join(str(s) for s in array.shape) + "\n").encode())
        fh.write(array.tobytes())


def read_array(path) -> np.ndarray:
    data = Path(path).read_bytes()
    head, sep, payload = data.partition(b"\n")
    words = head.decode(errors="replace").split()
    if not sep or not words or words[0] != "shape":
        raise ValueError(f"{path}: missing shape header")
    shape = tuple(int(w) for w in words[1:])
    if len(payload) != 8 * int(np.prod(shape)):
        raise ValueError(f"{path}: payload has {len(payload)} bytes, shape {shape} needs {8 * int(np.prod(shape))}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def write_manifest(path, entries: dict) -> None:
    lines = [f"{key} = {value}" for key, value in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def save_dataset(directory, clouds: CloudSet, task=None, seed: int = 0) -> Path:
    """Write clouds, classes and the 70/30 split (static tasks also get their samples)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    train, val = split_indices(len(clouds), seed)
    write_array(directory / "bonds.f64", clouds.bonds)
    write_array(directory / "classes.f64", clouds.classes.astype(np.float64))
    write_array(directory / "split.f64", np.isin(np.arange(len(clouds)), val).astype(np.float64))
    entries = {"version": MANIFEST_VERSION, **clouds.provenance,
               "class_names": ",".join(clouds.class_names), "n_clouds": len(clouds),
               "split_seed": seed, "n_train": len(train), "n_val": len(val),
               "arrays": "bonds.f64,classes.f64,split.f64"}
    if task is not None:
        kind = TaskKind.parse(task)
        entries["task"] = kind.value
        if not kind.is_dynamic:
            sample_seed = derive_seed(seed, "samples", kind.value)
            batch = make_samples(kind, clouds, sample_seed)
            write_array(directory / "inputs.f64", batch.inputs)
            write_array(directory / "labels.f64", batch.labels.astype(np.float64))
            entries["sample_seed"] = sample_seed
            entries["arrays"] += ",inputs.f64,labels.f64"
        else:
            entries["sample_seed"] = "per-epoch"
    write_manifest(directory / "manifest.txt", entries)
    return directory


def load_dataset(directory) -> tuple[CloudSet, np.ndarray, dict]:
    """Returns (clouds, is_validation mask, manifest)."""
    directory = Path(directory)
    manifest = read_manifest(directory / "manifest.txt")
    bonds = read_array(directory / "bonds.f64")
    classes = read_array(directory / "classes.f64").astype(np.int64)
    val_mask = read_array(directory / "split.f64").astype(bool)
    clouds = CloudSet(bonds, classes, manifest.get("class_names", "").split(","), manifest)
    return clouds, val_mask, manifest
