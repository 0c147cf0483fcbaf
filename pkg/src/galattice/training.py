"""Training loop: batching with gradient accumulation, plateau schedule and early stopping."""
from __future__ import annotations

import copy
import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import autodiff as ad
from .autodiff import Adam, PlateauSchedule
from .checkpoint import save_checkpoint
from .data import CloudSet, TaskBatch, make_samples
from .heads import GalaModel
from .model import ModelConfig
from .structures import derive_seed
from .tasks import TaskKind, metric_sums, task_loss

HISTORY_COLUMNS = ("epoch", "train_loss", "val_metric", "lr", "val_loss")


@dataclass
class TrainConfig:
    task: str = "frame"
    lr: float = 1e-3
    batch_size: int = 4
    accumulation: int = 16
    max_epochs: int = 128
    # dynamic tasks: batches counted as one training / validation epoch
    train_batches: int = 2048
    val_batches: int = 512
    beta: float = 1e-2
    seed: int = 0
    freeze_core: bool = False
    target_metric: float | None = None
    max_seconds: float | None = None
    eval_chunk: int = 256

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_metric: float = math.inf
    best_epoch: int = 0
    stopped_by: str = ""
    seconds: float = 0.0


def predict(model: GalaModel, inputs: np.ndarray, chunk: int = 256) -> dict:
    """Deterministic forward pass (eta = 0) over inputs in chunks."""
    outs = []
    with torch.no_grad():
        for start in range(0, len(inputs), chunk):
            x = torch.as_tensor(inputs[start : start + chunk])
            outs.append(model(x))
    return {key: torch.cat([o[key] for o in outs]) for key in outs[0] if isinstance(outs[0][key], torch.Tensor)}


def evaluate(model: GalaModel, batch: TaskBatch, beta: float = 1e-2, chunk: int = 256) -> tuple[float, float]:
    """(mean loss, validation metric) over a sample set."""
    total_loss, metric_sum, metric_n = 0.0, 0.0, 0
    with torch.no_grad():
        for start in range(0, len(batch), chunk):
            part = batch.take(slice(start, start + chunk))
            out = model(torch.as_tensor(part.inputs))
            labels = torch.as_tensor(part.labels)
            total_loss += float(task_loss(batch.kind, out, labels, beta=beta, reduction="none").sum())
            s, n = metric_sums(batch.kind, out["pred"], labels)
            metric_sum += s
            metric_n += n
    return total_loss / len(batch), metric_sum / metric_n


def _cycled(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    reps = -(-size // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:size]


class Trainer:
    """Trains one :class:`GalaModel` on train/validation cloud sets.

    Static tasks build their samples once; dynamic tasks redraw perturbations
    every epoch while validation uses one fixed draw.
    """

    def __init__(self, model: GalaModel, train: CloudSet, val: CloudSet, config: TrainConfig):
        self.model = model
        self.kind = TaskKind.parse(config.task)
        if model.task is not self.kind:
            raise ValueError(f"model built for {model.task.value}, config asks for {self.kind.value}")
        if len(train) == 0 or len(val) == 0:
            raise ValueError("training and validation sets must be non-empty")
        self.train_clouds, self.val_clouds = train, val
        self.config = config
        seed = config.seed
        if self.kind.is_dynamic:
            n_val = config.val_batches * config.batch_size
            rng = np.random.default_rng(derive_seed(seed, "val-draw"))
            self.val_batch = make_samples(self.kind, val.subset(_cycled(len(val), n_val, rng)),
                                          derive_seed(seed, "val-samples", self.kind.value))
            self.static_train = None
        else:
            self.val_batch = make_samples(self.kind, val, derive_seed(seed, "samples", self.kind.value, "val"))
            self.static_train = make_samples(self.kind, train, derive_seed(seed, "samples", self.kind.value, "train"))
        params = model.head_parameters() if config.freeze_core else dict(model.named_parameters())
        self.optimizer = Adam(params, lr=config.lr)
        self.schedule = PlateauSchedule(lr=config.lr, regime="dynamic" if self.kind.is_dynamic else "static",
                                        max_epochs=config.max_epochs)

    def epoch_samples(self, epoch: int) -> TaskBatch:
        rng = np.random.default_rng(derive_seed(self.config.seed, "epoch", epoch))
        if self.static_train is not None:
            return self.static_train.take(rng.permutation(len(self.static_train)))
        size = self.config.train_batches * self.config.batch_size
        clouds = self.train_clouds.subset(_cycled(len(self.train_clouds), size, rng))
        return make_samples(self.kind, clouds, derive_seed(self.config.seed, "epoch-samples", epoch))

    def _eta(self, n: int, gen: torch.Generator):
        if self.kind is not TaskKind.AUTOENCODER:
            return None
        return torch.randn((n, self.model.head.latent), generator=gen, dtype=torch.float64)

    def run_epoch(self, epoch: int) -> float:
        cfg = self.config
        samples = self.epoch_samples(epoch)
        gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "eta", epoch))
        window = cfg.batch_size * cfg.accumulation
        model = self.model
        frozen = [p for p in model.core.parameters()] if cfg.freeze_core else []
        for p in frozen:
            p.requires_grad_(False)
        if hasattr(model.head, "jitter"):
            model.head.jitter = True
        total = 0.0
        try:
            for start in range(0, len(samples), window):
                part = samples.take(slice(start, start + window))
                m = len(part)
                # average of per-batch means, matching accumulation over batches of batch_size
                sizes = [min(cfg.batch_size, m - b) for b in range(0, m, cfg.batch_size)]
                weights = torch.cat([torch.full((s,), 1.0 / (len(sizes) * s), dtype=ad.DTYPE) for s in sizes])
                out = model(torch.as_tensor(part.inputs), eta=self._eta(m, gen))
                per = task_loss(self.kind, out, torch.as_tensor(part.labels), beta=cfg.beta, reduction="none")
                loss = (weights * per).sum()
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, sample {start}")
                params = self.optimizer.params
                grads = torch.autograd.grad(loss, list(params.values()))
                self.optimizer.accumulate(dict(zip(params, grads)))
                self.optimizer.step()
                total += float(per.detach().sum())
        finally:
            for p in frozen:
                p.requires_grad_(True)
            if hasattr(model.head, "jitter"):
                model.head.jitter = False
        return total / len(samples)

    def fit(self, history_path=None, dump_dir=None) -> TrainResult:
        cfg = self.config
        result = TrainResult()
        best_state = None
        t0 = time.perf_counter()
        for epoch in range(1, cfg.max_epochs + 1):
            try:
                train_loss = self.run_epoch(epoch)
                val_loss, val_metric = evaluate(self.model, self.val_batch, cfg.beta, cfg.eval_chunk)
                if not math.isfinite(val_loss):
                    raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
            except TrainingDiverged:
                if dump_dir is not None:
                    Path(dump_dir).mkdir(parents=True, exist_ok=True)
                    save_checkpoint(self.model, Path(dump_dir) / "diverged.gala")
                raise
            lr_used = self.optimizer.lr
            row = {"epoch": epoch, "train_loss": train_loss, "val_metric": val_metric, "lr": lr_used,
                   "val_loss": val_loss}
            result.history.append(row)
            if history_path is not None:
                write_history(history_path, result.history)
            if val_metric < result.best_metric:
                result.best_metric, result.best_epoch = val_metric, epoch
                best_state = copy.deepcopy(self.model.state_dict())
            lr, stop = self.schedule.update(val_loss)
            self.optimizer.lr = lr
            elapsed = time.perf_counter() - t0
            if cfg.target_metric is not None and val_metric <= cfg.target_metric:
                result.stopped_by = "target"
            elif stop:
                result.stopped_by = "schedule"
            elif cfg.max_seconds is not None and elapsed > cfg.max_seconds:
                result.stopped_by = "time"
            if result.stopped_by:
                break
        result.stopped_by = result.stopped_by or "max_epochs"
        if best_state is not None:
            self.model.load_state_dict(best_state)
        result.seconds = time.perf_counter() - t0
        return result


def write_history(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in rows:
            writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])


def build_model(task, clouds: CloudSet, model_config: ModelConfig | None = None, seed: int = 0) -> GalaModel:
    kind = TaskKind.parse(task)
    k = clouds.bonds.shape[1]
    return GalaModel(kind, model_config, n_classes=len(clouds.class_names) if kind is TaskKind.FRAME else None,
                     n_points=k, seed=seed)


def train_model(task, train: CloudSet, val: CloudSet, config: TrainConfig | None = None,
                model_config: ModelConfig | None = None, model: GalaModel | None = None,
                history_path=None, dump_dir=None) -> tuple[GalaModel, TrainResult]:
    config = config or TrainConfig(task=TaskKind.parse(task).value)
    if TaskKind.parse(config.task) is not TaskKind.parse(task):
        config = TrainConfig(**{**config.to_dict(), "task": TaskKind.parse(task).value})
    model = model or build_model(task, train, model_config, seed=config.seed)
    result = Trainer(model, train, val, config).fit(history_path, dump_dir)
    return model, result
