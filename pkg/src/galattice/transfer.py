"""Source-to-target transfer grid with frozen-core, fine-tune and scratch arms."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import CloudSet, split_indices, subsample
from .heads import GalaModel
from .model import ModelConfig
from .structures import derive_seed
from .tasks import TaskKind
from .training import TrainConfig, build_model, train_model

FRACTIONS = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)
ARMS = ("frozen", "finetune")
SCRATCH = "scratch"
RESULT_COLUMNS = ("source", "target", "fraction", "arm", "replica", "best_metric")


@dataclass
class TransferSpec:
    source: TaskKind | None        # None for the scratch baseline
    target: TaskKind
    fraction: float
    freeze: bool = False
    replicas: int = 3
    seed: int = 0

    def __post_init__(self):
        self.target = TaskKind.parse(self.target)
        self.source = None if self.source in (None, SCRATCH) else TaskKind.parse(self.source)
        if self.fraction not in FRACTIONS:
            raise ValueError(f"fraction {self.fraction} not in {FRACTIONS}")
        if self.replicas < 1:
            raise ValueError("replica count must be >= 1")
        if self.source is None and self.freeze:
            raise ValueError("scratch baseline has no core to freeze")

    @property
    def arm(self) -> str:
        if self.source is None:
            return SCRATCH
        return "frozen" if self.freeze else "finetune"

    @property
    def source_label(self) -> str:
        return SCRATCH if self.source is None else self.source.value


@dataclass
class TransferResult:
    spec: TransferSpec
    metrics: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.metrics))

    @property
    def stderr(self) -> float:
        return standard_error(self.metrics)


def standard_error(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return float("nan")
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def replica_seed(seed: int, target: TaskKind, fraction: float, replica: int) -> int:
    """Shared by scratch and transfer arms so a replica sees the same subset and head init."""
    return derive_seed(seed, "replica", TaskKind.parse(target).value, float(fraction), replica)


def pretrain(task, train: CloudSet, val: CloudSet, config: TrainConfig,
             model_config: ModelConfig | None = None, checkpoint=None, history_path=None) -> GalaModel:
    model, _ = train_model(task, train, val, config, model_config, history_path=history_path)
    if checkpoint is not None:
        save_checkpoint(model, checkpoint)
    return model


def fine_tune(source: GalaModel | None, spec: TransferSpec, replica: int, train: CloudSet, val: CloudSet,
              config: TrainConfig, model_config: ModelConfig | None = None) -> tuple[float, GalaModel]:
    """One replica of one grid cell; returns (best validation metric, trained model)."""
    seed = replica_seed(spec.seed, spec.target, spec.fraction, replica)
    subset = train.subset(subsample(len(train), spec.fraction, seed))
    cfg = TrainConfig(**{**config.to_dict(), "task": spec.target.value, "seed": seed,
                         "freeze_core": spec.freeze})
    model = build_model(spec.target, train, model_config or (source.config if source else None), seed=seed)
    if source is not None:
        if source.config != model.config:
            raise ValueError("source checkpoint and target model configs differ")
        model.core.load_state_dict(source.core.state_dict())
    _, result = train_model(spec.target, subset, val, cfg, model=model)
    return result.best_metric, model


def grid_specs(tasks, fractions, replicas: int, seed: int = 0, sources=None) -> list[TransferSpec]:
    """Per target and fraction: one scratch cell plus frozen and fine-tune cells per source."""
    tasks = [TaskKind.parse(t) for t in tasks]
    sources = tasks if sources is None else [TaskKind.parse(s) for s in sources]
    specs = []
    for target in tasks:
        for fraction in fractions:
            specs.append(TransferSpec(None, target, fraction, False, replicas, seed))
            for source in sources:
                for freeze in (True, False):
                    specs.append(TransferSpec(source, target, fraction, freeze, replicas, seed))
    return specs


def expected_rows(n_targets: int, n_sources: int, n_fractions: int, replicas: int) -> int:
    return n_targets * n_fractions * replicas * (2 * n_sources + 1)


def _key(source, target, fraction, arm, replica):
    return (str(source), str(target), repr(float(fraction)), str(arm), int(replica))


def read_results(path) -> dict:
    out = {}
    if Path(path).exists():
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                key = _key(row["source"], row["target"], row["fraction"], row["arm"], row["replica"])
                out[key] = float(row["best_metric"])
    return out


def _run_cell(args):
    spec, replica, source_path, train, val, config, model_config, threads = args
    torch.set_num_threads(threads)
    source = load_checkpoint(source_path) if source_path else None
    metric, _ = fine_tune(source, spec, replica, train, val, config, model_config)
    return spec, replica, metric


def transfer_matrix(tasks, clouds: CloudSet, out_dir, fractions=FRACTIONS, replicas: int = 3,
                    config: TrainConfig | None = None, model_config: ModelConfig | None = None,
                    seed: int = 0, workers: int = 1, sources=None, log=print) -> list[TransferResult]:
    """Run (or resume) the full grid; writes ``transfer_results.csv`` and ``transfer_summary.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = config or TrainConfig()
    tasks = [TaskKind.parse(t) for t in tasks]
    sources = tasks if sources is None else [TaskKind.parse(s) for s in sources]
    train_idx, val_idx = split_indices(len(clouds), seed)
    train, val = clouds.subset(train_idx), clouds.subset(val_idx)

    source_paths = {}
    for source in sources:
        path = out_dir / "pretrained" / f"{source.value}.gala"
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            log(f"pretraining {source.value}")
            cfg = TrainConfig(**{**config.to_dict(), "task": source.value,
                                 "seed": derive_seed(seed, "pretrain", source.value)})
            pretrain(source, train, val, cfg, model_config, checkpoint=path,
                     history_path=out_dir / "pretrained" / f"{source.value}_history.csv")
        source_paths[source] = str(path)

    results_path = out_dir / "transfer_results.csv"
    done = read_results(results_path)
    specs = grid_specs(tasks, fractions, replicas, seed, sources)
    jobs = []
    for spec in specs:
        for r in range(replicas):
            if _key(spec.source_label, spec.target.value, spec.fraction, spec.arm, r) not in done:
                path = source_paths.get(spec.source) if spec.source else None
                jobs.append((spec, r, path, train, val, config, model_config, 1))

    if not results_path.exists():
        with open(results_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(RESULT_COLUMNS)

    def record(spec, r, metric):
        done[_key(spec.source_label, spec.target.value, spec.fraction, spec.arm, r)] = metric
        with open(results_path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [spec.source_label, spec.target.value, repr(float(spec.fraction)), spec.arm, r, repr(metric)])
        log(f"{spec.source_label} -> {spec.target.value} f={spec.fraction:g} {spec.arm} r{r}: {metric:.4f}")

    if workers > 1 and jobs:
        with ProcessPoolExecutor(workers) as pool:
            for spec, r, metric in pool.map(_run_cell, jobs):
                record(spec, r, metric)
    else:
        for job in jobs:
            record(*_run_cell(job))

    results = []
    for spec in specs:
        metrics = [done[_key(spec.source_label, spec.target.value, spec.fraction, spec.arm, r)]
                   for r in range(replicas)]
        results.append(TransferResult(spec, metrics))
    write_summary(out_dir / "transfer_summary.csv", results)
    # rewrite the per-replica table in grid order so finished runs are deterministic
    with open(results_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for res in results:
            s = res.spec
            for r, metric in enumerate(res.metrics):
                w.writerow([s.source_label, s.target.value, repr(float(s.fraction)), s.arm, r, repr(metric)])
    return results


def write_summary(path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "target", "fraction", "arm", "replicas", "mean", "stderr"])
        for res in results:
            s = res.spec
            w.writerow([s.source_label, s.target.value, repr(float(s.fraction)), s.arm, len(res.metrics),
                        repr(res.mean), repr(res.stderr)])
