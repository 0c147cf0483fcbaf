"""Pretrain a self-supervised source, then fine-tune frame classification on 1% of the data.

Compares the fine-tuned arm against training from scratch over a few replicas
and prints mean best metric (1 - accuracy) with its standard error per arm.
"""
import argparse
import time
from pathlib import Path

import torch

from galattice.data import prototype_clouds, split_indices
from galattice.training import TrainConfig
from galattice.transfer import TransferSpec, fine_tune, pretrain, standard_error

PROTOTYPES = ("cP1-Po", "cI2-W", "cF4-Cu", "cF8-C", "hP2-Mg")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--source", default="nearest_bond", choices=("nearest_bond", "denoising"))
    ap.add_argument("--clouds-per-class", type=int, default=2000)
    ap.add_argument("--noise", type=float, default=1e-2)
    ap.add_argument("--fraction", type=float, default=1e-2)
    ap.add_argument("--replicas", type=int, default=3)
    ap.add_argument("--pretrain-epochs", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default="runs/transfer")
    args = ap.parse_args()
    torch.set_num_threads(args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    clouds = prototype_clouds(PROTOTYPES, args.clouds_per_class, (args.noise,), seed=args.seed)
    train_idx, val_idx = split_indices(len(clouds), args.seed)
    train, val = clouds.subset(train_idx), clouds.subset(val_idx)
    source = pretrain(args.source, train, val,
                      TrainConfig(task=args.source, max_epochs=args.pretrain_epochs, seed=args.seed),
                      checkpoint=out / f"{args.source}.gala", history_path=out / f"{args.source}_history.csv")
    print(f"pretrained {args.source} in {time.perf_counter() - t0:.0f} s")

    base = TrainConfig(task="frame", seed=args.seed)
    arms = {"scratch": [], "finetune": []}
    for r in range(args.replicas):
        for arm, src in (("scratch", None), ("finetune", source)):
            spec = TransferSpec(src and args.source, "frame", args.fraction, seed=args.seed)
            metric, _ = fine_tune(src, spec, r, train, val, base, source.config)
            arms[arm].append(metric)
            print(f"replica {r} {arm}: {metric:.4f}")
    for arm, values in arms.items():
        mean = sum(values) / len(values)
        print(f"{arm}: mean {mean:.4f} se {standard_error(values):.4f}")
    print(f"total {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
