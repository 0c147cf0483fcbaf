"""Command-line entry point: ``galattice <subcommand> [--config FILE] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, validate

SUBCOMMANDS = ("gen-data", "train", "embed", "zero-shot", "transfer", "phase-hist", "featurize",
               "potential-table")
EXIT_CONFIG, EXIT_RUNTIME = 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="galattice", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file ([section] key = value)")
    common.add_argument("--seed", type=int, help="global seed (run.seed)")
    common.add_argument("--out", help="output directory (run.out)")
    common.add_argument("--threads", type=int, help="torch threads; falls back to GALATTICE_THREADS")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("gen-data", "train", "transfer", "featurize", "embed"):
            p.add_argument("--prototype", action="append", help="prototype name or structure file (repeatable)")
            p.add_argument("--noise", type=float, action="append", help="noise level in sigma0 (repeatable)")
            p.add_argument("--clouds-per-class", type=int)
            p.add_argument("--dataset", help="dataset directory written by gen-data")
        if name in ("gen-data", "train", "embed"):
            p.add_argument("--task")
        if name in ("embed", "phase-hist", "zero-shot"):
            p.add_argument("--checkpoint", action="append")
        if name == "featurize":
            p.add_argument("--method", action="append", choices=("Q", "Psi", "Radial"))
        if name == "phase-hist":
            p.add_argument("--trajectory")
        if name == "potential-table":
            p.add_argument("--name")
    return parser


def resolve(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        section, dot, field_name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        config.set(section.strip(), field_name.strip(), value)
    if args.seed is not None:
        config.run.seed = args.seed
    if args.out is not None:
        config.run.out = args.out
    threads = args.threads if args.threads is not None else os.environ.get("GALATTICE_THREADS")
    if threads is not None:
        try:
            config.run.threads = int(threads)
        except ValueError:
            raise ConfigError(f"GALATTICE_THREADS must be an integer, got {threads!r}") from None
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if get("prototype"):
        config.data.prototypes = tuple(get("prototype"))
    if get("noise"):
        config.data.noise_levels = tuple(get("noise"))
    if get("clouds_per_class"):
        config.data.clouds_per_class = get("clouds_per_class")
    if get("dataset"):
        config.data.dataset = get("dataset")
    if get("task"):
        config.train.task = get("task")
        config.data.task = get("task") if args.command == "gen-data" else config.data.task
    if get("checkpoint"):
        if args.command in ("embed", "phase-hist"):
            config.train.checkpoint = get("checkpoint")[0]
        else:
            config.eval.checkpoints = tuple(get("checkpoint"))
    if get("method"):
        config.eval.methods = tuple(get("method"))
    if get("trajectory"):
        config.trajectory.path = get("trajectory")
    if get("name"):
        config.potential.name = get("name")
    validate(config)
    return config


# --- helpers -----------------------------------------------------------------

def _model_config(cfg: RunConfig):
    from .model import ModelConfig

    m = cfg.model
    return ModelConfig(width=m.width, hidden=m.hidden, n_blocks=m.n_blocks, mv_cap=m.mv_cap)


def _train_config(cfg: RunConfig, task=None, seed=None):
    from .training import TrainConfig

    t = cfg.train
    return TrainConfig(task=task or t.task, lr=t.lr, batch_size=t.batch_size, accumulation=t.accumulation,
                       max_epochs=t.max_epochs, train_batches=t.train_batches, val_batches=t.val_batches,
                       beta=t.beta, seed=cfg.run.seed if seed is None else seed, freeze_core=t.freeze_core,
                       target_metric=t.target_metric if t.target_metric >= 0 else None,
                       max_seconds=t.max_seconds if t.max_seconds > 0 else None)


def _clouds(cfg: RunConfig):
    from .data import load_dataset, prototype_clouds, split_indices

    if cfg.data.dataset:
        clouds, val_mask, _ = load_dataset(cfg.data.dataset)
        return clouds, np.flatnonzero(~val_mask), np.flatnonzero(val_mask)
    d = cfg.data
    clouds = prototype_clouds(d.prototypes, d.clouds_per_class, tuple(float(x) for x in d.noise_levels),
                              seed=cfg.run.seed, k=d.k, min_particles=d.min_particles)
    train, val = split_indices(len(clouds), cfg.run.seed)
    return clouds, train, val


def _snapshot(spec: str, cfg: RunConfig):
    """``proto:NAME:NOISE:REPLICA`` or ``path.xyz[@frame]``."""
    from .structures import add_thermal_noise, build_prototype, derive_seed, load_trajectory, replicate

    if spec.startswith("proto:"):
        try:
            _, name, noise, replica = spec.split(":")
            noise, replica = float(noise), int(replica)
        except ValueError:
            raise ConfigError(f"snapshot spec {spec!r} must be proto:NAME:NOISE:REPLICA") from None
        base = replicate(build_prototype(name), cfg.eval.snapshot_particles)
        return add_thermal_noise(base, noise, derive_seed(cfg.run.seed, "snapshot", name, noise, replica))
    path, _, frame = spec.partition("@")
    frames = load_trajectory(path)
    return frames[int(frame) if frame else -1].config


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(cfg.dumps())


# --- subcommands ---------------------------------------------------------------

def cmd_gen_data(cfg, out):
    from .data import save_dataset

    clouds, _, _ = _clouds(cfg)
    directory = save_dataset(out / "dataset", clouds, task=cfg.data.task or None, seed=cfg.run.seed)
    print(f"wrote {len(clouds)} clouds to {directory}", file=sys.stderr)


def cmd_train(cfg, out):
    from .checkpoint import save_checkpoint
    from .training import train_model

    clouds, train, val = _clouds(cfg)
    model, result = train_model(cfg.train.task, clouds.subset(train), clouds.subset(val), _train_config(cfg),
                                _model_config(cfg), history_path=out / "history.csv", dump_dir=out)
    save_checkpoint(model, out / "model.gala")
    print(f"best val metric {result.best_metric:.4f} at epoch {result.best_epoch} ({result.stopped_by})",
          file=sys.stderr)


def cmd_embed(cfg, out):
    from .checkpoint import load_checkpoint
    from .evaluation import embed
    from .features import write_matrix_csv

    if not cfg.train.checkpoint:
        raise ConfigError("embed needs a checkpoint (--checkpoint or train.checkpoint)")
    model = load_checkpoint(cfg.train.checkpoint)
    clouds, _, _ = _clouds(cfg)
    matrix = embed(model, clouds)
    write_matrix_csv(out / "embedding.csv", matrix.values, prefix="e")


def cmd_zero_shot(cfg, out):
    from .checkpoint import load_checkpoint
    from .evaluation import SnapshotPair, baseline_featurizer, learned_featurizer, write_auc_csv, zero_shot_pair

    pair = SnapshotPair(cfg.eval.pair_label, _snapshot(cfg.eval.snapshot_a, cfg), _snapshot(cfg.eval.snapshot_b, cfg))
    rows = []
    for path in cfg.eval.checkpoints:
        model = load_checkpoint(path)
        rows.append((pair.label, model.task.value, zero_shot_pair(learned_featurizer(model), pair, cfg.data.k)))
    for method in cfg.eval.methods:
        rows.append((pair.label, method, zero_shot_pair(baseline_featurizer(method), pair, cfg.data.k)))
    write_auc_csv(out / "zero_shot.csv", rows)


def cmd_transfer(cfg, out):
    from .transfer import transfer_matrix

    clouds, _, _ = _clouds(cfg)
    t = cfg.transfer
    transfer_matrix(t.tasks, clouds, out, fractions=tuple(float(f) for f in t.fractions), replicas=t.replicas,
                    config=_train_config(cfg), model_config=_model_config(cfg), seed=cfg.run.seed,
                    workers=t.workers, sources=t.sources or None,
                    log=lambda msg: print(msg, file=sys.stderr))


def cmd_phase_hist(cfg, out):
    from .checkpoint import load_checkpoint, save_checkpoint
    from .data import split_indices
    from .evaluation import frame_histogram, trajectory_cloudset, write_histogram_csv
    from .structures import load_trajectory
    from .training import train_model

    if not cfg.trajectory.path:
        raise ConfigError("phase-hist needs trajectory.path (--trajectory)")
    frames = load_trajectory(cfg.trajectory.path)
    stride = cfg.trajectory.stride
    if cfg.train.checkpoint:
        model = load_checkpoint(cfg.train.checkpoint)
    else:
        clouds = trajectory_cloudset(frames, stride, cfg.data.k, cfg.trajectory.per_frame or None, cfg.run.seed)
        train, val = split_indices(len(clouds), cfg.run.seed)
        model, _ = train_model("frame", clouds.subset(train), clouds.subset(val), _train_config(cfg, "frame"),
                               _model_config(cfg), history_path=out / "history.csv")
        save_checkpoint(model, out / "model.gala")
    hist, positions = frame_histogram(model, frames, stride, cfg.data.k)
    write_histogram_csv(out / "phase_hist.csv", hist, positions, frames)


def cmd_featurize(cfg, out):
    from .features import featurize, write_matrix_csv

    clouds, _, _ = _clouds(cfg)
    for method in cfg.eval.methods:
        write_matrix_csv(out / f"features_{method}.csv", featurize(method, clouds.bonds), prefix=method.lower())


def cmd_potential_table(cfg, out):
    from .potentials import PotentialParams, potential_table

    p = cfg.potential
    extra = {"sigma": p.sigma}
    if p.cutoff > 0:
        extra["cutoff"] = p.cutoff
    if p.kind:
        params = PotentialParams(kind=p.kind, k=p.k, phi=p.phi, r0=p.r0, epsilon=p.epsilon, **extra)
        label = p.kind
    else:
        params = PotentialParams.named(p.name, **extra)
        label = p.name
    table = potential_table(params, p.r_min, p.r_max if p.r_max > 0 else None, p.n)
    with open(out / f"potential_{label}.csv", "w") as fh:
        fh.write("r,u,du_dr\n")
        for row in table:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "embed": cmd_embed, "zero-shot": cmd_zero_shot,
    "transfer": cmd_transfer, "phase-hist": cmd_phase_hist, "featurize": cmd_featurize,
    "potential-table": cmd_potential_table,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
    except ConfigError as exc:
        print(f"galattice: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    import torch

    torch.set_num_threads(cfg.run.threads)
    out = Path(cfg.run.out)
    try:
        _write_resolved(cfg, out)
        COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"galattice: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit code 2
        print(f"galattice: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
