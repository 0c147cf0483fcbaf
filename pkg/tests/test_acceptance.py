"""End-to-end acceptance checks; each test records one PASS/FAIL line for the summary."""
import csv
import itertools
import os
import random
import shutil
import time

import numpy as np
import pytest
import torch
from scipy.special import sph_harm_y

from _acceptance import record
from _fd import numeric_grad, rel_error
from galattice import autodiff as ad
from galattice import ga
from galattice.cli import main as cli_main
from galattice.data import prototype_clouds, split_indices, subsample
from galattice.evaluation import SnapshotPair, learned_featurizer, roc_auc, zero_shot_pair
from galattice.features import DIMENSIONS, featurize, steinhardt_q
from galattice.heads import GalaModel
from galattice.model import ModelConfig, cap_multivectors
from galattice.potentials import PotentialParams, du_ljg, du_opp, u_ljg, u_opp
from galattice.structures import (
    TrajectoryFrame, add_thermal_noise, build_prototype, replicate, write_trajectory,
)
from galattice.tasks import TaskKind, task_loss
from galattice.training import TrainConfig, build_model, train_model
from galattice.transfer import (
    TransferSpec, expected_rows, fine_tune, pretrain, replica_seed, standard_error, transfer_matrix,
)

torch.set_default_dtype(torch.float64)

PROTOTYPES = ("cP1-Po", "cI2-W", "cF4-Cu", "cF8-C", "hP2-Mg")
SMALL = ModelConfig(width=8, hidden=16, n_blocks=2)


def worst(values):
    return max(values) if values else 0.0


# --- 1. equivariance -----------------------------------------------------------

def test_01_equivariance():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    models = {kind: GalaModel(kind, n_classes=5, seed=i).eval() for i, kind in enumerate(TaskKind)}
    errors = []
    with torch.no_grad():
        for _ in range(100):
            bonds = torch.as_tensor(rng.normal(size=(1, 20, 3)))
            rotor = ga.random_rotor(rng)
            rot = torch.as_tensor(rotor.matrix())
            perm = torch.as_tensor(rng.permutation(20))
            moved = (bonds @ rot.T)[:, perm]
            core = models[TaskKind.FRAME].core
            (v, mv), (v2, mv2) = core(bonds), core(moved)
            errors.append(float(torch.max(torch.abs(v2 - v[:, perm]))))
            errors.append(float(torch.max(torch.abs(mv2 - ga.rotate_mv(mv[:, perm], rotor)))))
            for kind, model in models.items():
                out, out2 = model(bonds)["pred"], model(moved)["pred"]
                if kind is TaskKind.DENOISING:
                    expected = (out @ rot.T)[:, perm]
                elif kind is TaskKind.NOISY_BOND:
                    expected = out[:, perm]
                elif kind is TaskKind.FRAME:
                    expected = out
                else:   # one vector or a decoded point set: rotates, ignores input order
                    expected = out @ rot.T
                errors.append(float(torch.max(torch.abs(out2 - expected))))
    seconds = time.perf_counter() - t0
    ok = worst(errors) < 1e-8 and seconds < 60
    assert record(1, ok, f"max discrepancy {worst(errors):.2e} over 100 triples x 6 heads, {seconds:.1f} s")


# --- 2. gradients -----------------------------------------------------------------

def _rand(*shape, seed=0):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed)) * 2 - 1


W = _rand(5, 3, seed=99)
W8 = _rand(5, 8, seed=98)

OPERATORS = {
    "dense": (lambda x, w, b: (ad.dense(x, w, b) * W[:4]).sum(), (_rand(4, 5), _rand(5, 3, seed=1), _rand(3, seed=2))),
    "relu": (lambda x: (ad.relu(x) * W).sum(), (_rand(5, 3, seed=3) * 0.5 + 0.55,)),
    "softmax": (lambda x: (ad.softmax(x) * W).sum(), (_rand(5, 3, seed=4),)),
    "layer_norm": (lambda x, g, b: (ad.layer_norm(x, g, b) * W).sum(),
                   (_rand(5, 3, seed=5), _rand(3, seed=6), _rand(3, seed=7))),
    "concat": (lambda a, b: (ad.concat([a, b]) * _rand(5, 5, seed=8)).sum(), (_rand(5, 3), _rand(5, 2, seed=9))),
    "add": (lambda a, b: (ad.add(a, b) * W).sum(), (_rand(5, 3), _rand(5, 3, seed=10))),
    "mul": (lambda a, b: (ad.mul(a, b) * W).sum(), (_rand(5, 3), _rand(5, 3, seed=11))),
    "reduce_sum": (lambda x: (ad.reduce_sum(x, dim=1) * _rand(5, seed=12)).sum(), (_rand(5, 3),)),
    "reduce_mean": (lambda x: (ad.reduce_mean(x, dim=0) * _rand(3, seed=13)).sum(), (_rand(5, 3),)),
    "mse": (lambda p, t: ad.mse(p, t), (_rand(5, 3), _rand(5, 3, seed=14))),
    "cross_entropy": (lambda z: ad.cross_entropy(z, torch.tensor([0, 2, 1, 1, 0])), (_rand(5, 3, seed=15),)),
    "gaussian_kl": (lambda m, lv: ad.gaussian_kl(m, lv), (_rand(4, 8), _rand(4, 8, seed=16))),
    "geometric_product": (lambda a, b: (ga.gp(a, b) * W8).sum(), (_rand(5, 8, seed=17), _rand(5, 8, seed=18))),
    "mv_invariants": (lambda a: (ga.mv_invariants(a) * _rand(5, 4, seed=19)).sum(), (_rand(5, 8, seed=20),)),
    "cap_multivectors": (lambda a: (cap_multivectors(a * 3, 4.0) * W8).sum(), (_rand(5, 8, seed=21),)),
}


def _operator_error(fn, args):
    worst_err = 0.0
    for k, arg in enumerate(args):
        def scalar(x, k=k):
            call = list(args)
            call[k] = x
            return fn(*call)

        x = arg.detach().clone().requires_grad_(True)
        (g,) = torch.autograd.grad(scalar(x), x)
        worst_err = max(worst_err, rel_error(g, numeric_grad(scalar, arg)))
    return worst_err


def _end_to_end_error(kind):
    k = 6
    model = GalaModel(kind, ModelConfig(width=4, hidden=5, n_blocks=2), n_classes=3, n_points=k, seed=11)
    g = torch.Generator().manual_seed(12)
    bonds = torch.randn(2, k, 3, generator=g)
    labels = {
        TaskKind.AUTOENCODER: torch.randn(2, k, 3, generator=g),
        TaskKind.DENOISING: torch.randn(2, k, 3, generator=g),
        TaskKind.FRAME: torch.tensor([0, 2]),
        TaskKind.SHIFT: torch.randn(2, 3, generator=g),
        TaskKind.NEAREST_BOND: torch.randn(2, 3, generator=g),
        TaskKind.NOISY_BOND: torch.randint(0, 2, (2, k), generator=g),
    }[kind]
    eta = torch.randn(2, 8, generator=g)
    params = list(model.parameters())
    grads = torch.autograd.grad(task_loss(kind, model(bonds, eta=eta), labels, beta=0.1), params)
    flat = torch.cat([p.detach().reshape(-1) for p in params])

    def loss_at(vec):
        offset = 0
        with torch.no_grad():
            for p in params:
                p.copy_(vec[offset : offset + p.numel()].view_as(p))
                offset += p.numel()
            return task_loss(kind, model(bonds, eta=eta), labels, beta=0.1)

    fd = numeric_grad(loss_at, flat)
    loss_at(flat)
    return rel_error(torch.cat([x.reshape(-1) for x in grads]), fd)


def test_02_gradients():
    t0 = time.perf_counter()
    op_err = {name: _operator_error(fn, args) for name, (fn, args) in OPERATORS.items()}
    e2e_err = {kind.value: _end_to_end_error(kind) for kind in TaskKind}
    seconds = time.perf_counter() - t0
    ok = max(op_err.values()) < 1e-5 and max(e2e_err.values()) < 1e-4 and seconds < 120
    assert record(2, ok, f"operators {max(op_err.values()):.1e} ({len(op_err)} ops), "
                         f"end-to-end {max(e2e_err.values()):.1e} (6 tasks), {seconds:.1f} s")


# --- 3. geometric algebra -----------------------------------------------------------

# blades as bitmasks (e1=1, e2=2, e3=4), in storage order
MASKS = (0, 1, 2, 4, 3, 5, 6, 7)


def _mask_product(a, b):
    """Sign and blade of e_a e_b: count the swaps needed to bring the factors in order."""
    swaps, shifted = 0, a >> 1
    while shifted:
        swaps += bin(shifted & b).count("1")
        shifted >>= 1
    return (-1) ** swaps, a ^ b


def _expanded_product(x, y):
    out = [0] * 8
    for i, j in itertools.product(range(8), repeat=2):
        sign, blade = _mask_product(MASKS[i], MASKS[j])
        out[MASKS.index(blade)] += sign * x[i] * y[j]
    return out


def test_03_geometric_algebra():
    rng = random.Random(0)
    exact = True
    for _ in range(500):
        x = [rng.randint(-9, 9) for _ in range(8)]
        y = [rng.randint(-9, 9) for _ in range(8)]
        expected = np.array(_expanded_product(x, y), dtype=float)
        exact &= np.array_equal((ga.Multivector(x) * ga.Multivector(y)).values, expected)
        exact &= np.array_equal(ga.gp(torch.tensor([x], dtype=torch.float64),
                                      torch.tensor([y], dtype=torch.float64))[0].numpy(), expected)
    nprng = np.random.default_rng(1)
    laws = []
    for _ in range(1000):
        a, b, c = (ga.Multivector(nprng.uniform(-1, 1, 8)) for _ in range(3))
        laws.append(np.max(np.abs(((a * b) * c).values - (a * (b * c)).values)))
        laws.append(np.max(np.abs((a * (b + c)).values - (a * b + a * c).values)))
        laws.append(np.max(np.abs(((a + b) * c).values - (a * c + b * c).values)))
    ok = exact and max(laws) < 1e-12
    assert record(3, ok, f"table expansion exact={exact}, algebra laws max {max(laws):.1e} over 1000 triples")


# --- 4. baselines -------------------------------------------------------------------

def _oracle_q(dirs, l):
    d = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    theta, phi = np.arccos(d[:, 2]), np.arctan2(d[:, 1], d[:, 0])
    total = sum(abs(np.mean(sph_harm_y(l, m, theta, phi))) ** 2 for m in range(-l, l + 1))
    return np.sqrt(4 * np.pi / (2 * l + 1) * total)


def test_04_baselines():
    fcc = np.array([p for p in itertools.product([-1, 0, 1], repeat=3) if sum(map(abs, p)) == 2], float)
    bcc = np.array(list(itertools.product([-1, 1], repeat=3)), float)
    err = max(abs(steinhardt_q(fcc, 6, 12) - _oracle_q(fcc, 6)), abs(steinhardt_q(bcc, 6, 8) - _oracle_q(bcc, 6)))
    clouds = np.random.default_rng(0).normal(size=(3, 20, 3))
    dims = {m: featurize(m, clouds).shape[1] for m in ("Q", "Psi", "Radial")}
    ok = err < 1e-10 and dims == {"Q": 102, "Psi": 2873, "Radial": 19} == DIMENSIONS
    assert record(4, ok, f"q6 fcc {steinhardt_q(fcc, 6, 12):.6f} bcc {steinhardt_q(bcc, 6, 8):.6f} "
                         f"oracle error {err:.1e}; dimensions {dims}")


# --- 5. ROC AUC ---------------------------------------------------------------------

def test_05_roc_auc():
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(1000):
        a = rng.integers(-4, 5, size=rng.integers(1, 51)) * 0.5
        b = rng.integers(-4, 5, size=rng.integers(1, 51)) * 0.5 + rng.choice([0.0, 0.25])
        wins = sum((y > x) + 0.5 * (y == x) for x in a for y in b)
        mismatches += roc_auc(a, b).raw != wins / (len(a) * len(b))
    pop = rng.normal(size=40)
    control = roc_auc(pop, pop).auc
    ok = mismatches == 0 and control == 0.5
    assert record(5, ok, f"{mismatches} mismatches against pair counting in 1000 cases, control {control}")


# --- 6 / 7. desk-scale training and zero-shot -------------------------------------------

@pytest.fixture(scope="module")
def frame_clouds():
    return prototype_clouds(PROTOTYPES, 2000, (1e-2,), seed=0)


@pytest.fixture(scope="module")
def frame_run(frame_clouds):
    torch.set_num_threads(min(4, os.cpu_count() or 1))
    t0 = time.perf_counter()
    train, val = split_indices(len(frame_clouds), 0)
    config = TrainConfig(task="frame", max_epochs=30, seed=0, target_metric=0.1, max_seconds=1800)
    model, result = train_model("frame", frame_clouds.subset(train), frame_clouds.subset(val), config)
    torch.set_num_threads(1)
    return model, result, time.perf_counter() - t0


def test_06_frame_classification(frame_run):
    _, result, seconds = frame_run
    accuracy = 1.0 - result.best_metric
    ok = accuracy >= 0.9 and len(result.history) <= 30 and seconds <= 1800
    assert record(6, ok, f"val accuracy {accuracy:.4f} after {len(result.history)} epochs in {seconds:.0f} s "
                         f"on {min(4, os.cpu_count() or 1)} core(s)")


def _snapshot(name, seed, noise=1e-2):
    # same noise level the frame model was trained at
    return add_thermal_noise(replicate(build_prototype(name), 1000), noise, seed)


def test_07_zero_shot(frame_run):
    model = frame_run[0]
    features = learned_featurizer(model)
    cu = _snapshot("cF4-Cu", 1)
    pair = zero_shot_pair(features, SnapshotPair("S_A/S_B", cu, _snapshot("hP2-Mg", 2)))
    control = zero_shot_pair(features, SnapshotPair("L_A/L_A", cu, _snapshot("cF4-Cu", 3)))
    ok = pair.auc >= 0.9 and control.auc <= 0.6
    assert record(7, ok, f"cF4-Cu vs hP2-Mg AUC {pair.auc:.4f}, cF4-Cu replica control {control.auc:.4f}")


# --- 8. transfer mechanics -------------------------------------------------------------

def test_08_transfer_mechanics(tmp_path):
    clouds = prototype_clouds(("cI2-W", "cF4-Cu"), 40, (1e-2,), seed=1, min_particles=256)
    train_idx, val_idx = split_indices(len(clouds), 0)
    train, val = clouds.subset(train_idx), clouds.subset(val_idx)
    fast = TrainConfig(max_epochs=1, accumulation=2, train_batches=8, val_batches=4)

    source = pretrain("shift", train, val, TrainConfig(**{**fast.to_dict(), "task": "shift"}), SMALL)
    _, frozen = fine_tune(source, TransferSpec("shift", "frame", 1.0, freeze=True), 0, train, val, fast)
    core_same = all(frozen.core.state_dict()[k].numpy().tobytes() == v.numpy().tobytes()
                    for k, v in source.core.state_dict().items())

    sizes_ok = all(len(subsample(n, f, s)) == max(1, int(np.floor(f * n)))
                   for n in (1, 7, 56, 999, 7000) for f in (1e-4, 1e-3, 1e-2, 1e-1, 1.0) for s in (0, 1))

    transfer_matrix(["frame", "nearest_bond"], clouds, tmp_path, fractions=(1e-2, 1.0), replicas=2,
                    config=fast, model_config=SMALL, log=lambda m: None)
    with open(tmp_path / "transfer_results.csv") as fh:
        n_rows = len(list(csv.DictReader(fh)))
    rows_ok = n_rows == expected_rows(2, 2, 2, 2)

    spec = TransferSpec(None, "frame", 0.1, seed=3)
    metric, scratch = fine_tune(None, spec, 1, train, val, fast, SMALL)
    seed = replica_seed(3, "frame", 0.1, 1)
    direct, result = train_model("frame", train.subset(subsample(len(train), 0.1, seed)), val,
                                 TrainConfig(**{**fast.to_dict(), "task": "frame", "seed": seed}),
                                 model=build_model("frame", train, SMALL, seed=seed))
    scratch_same = metric == result.best_metric and all(
        a.numpy().tobytes() == b.numpy().tobytes()
        for a, b in zip(scratch.state_dict().values(), direct.state_dict().values()))

    ok = core_same and sizes_ok and rows_ok and scratch_same
    assert record(8, ok, f"frozen core identical={core_same}, subset sizes={sizes_ok}, "
                         f"grid rows {n_rows}/{expected_rows(2, 2, 2, 2)}, scratch bit-identical={scratch_same}")


# --- 9. transfer direction ---------------------------------------------------------------

SOURCE = "nearest_bond"
PRETRAIN_EPOCHS = 3


def test_09_transfer_direction(frame_clouds):
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    train_idx, val_idx = split_indices(len(frame_clouds), 0)
    train, val = frame_clouds.subset(train_idx), frame_clouds.subset(val_idx)
    source = pretrain(SOURCE, train, val, TrainConfig(task=SOURCE, max_epochs=PRETRAIN_EPOCHS, seed=0))
    base = TrainConfig(task="frame", seed=0)
    arms = {"scratch": [], "finetune": []}
    for r in range(3):
        for arm, src in (("scratch", None), ("finetune", source)):
            metric, _ = fine_tune(src, TransferSpec(src and SOURCE, "frame", 1e-2), r, train, val, base,
                                  source.config)
            arms[arm].append(metric)
    scratch, tuned = np.mean(arms["scratch"]), np.mean(arms["finetune"])
    se = standard_error(arms["scratch"])
    ok = tuned <= scratch + se
    assert record(9, ok, f"{SOURCE} -> frame at 1%: fine-tuned {tuned:.4f} vs scratch {scratch:.4f} "
                         f"+ SE {se:.4f} (1 - accuracy, 3 replicas, {time.perf_counter() - t0:.0f} s)")


# --- 10. potentials ---------------------------------------------------------------------

def test_10_potentials():
    errs = [abs(float(u_opp(1.0, PotentialParams("opp", k=k, phi=phi))) - (1 + np.cos(phi)))
            for k, phi in [(5.0, 2.8), (8.5, 1.5), (7.5, 3.9), (4.0, 0.0)]]
    errs += [abs(float(u_ljg(1.0, PotentialParams("ljg", r0=r0, epsilon=0.0))) + 23 / 12) for r0 in (1.0, 1.1, 1.3)]
    h = 1e-6
    derr = []
    for params in [PotentialParams.named("cF4-Cu"), PotentialParams.named("icosahedral"),
                   PotentialParams.named("cI2-W"), PotentialParams.named("hP2-Mg")]:
        u, du = (u_opp, du_opp) if params.kind == "opp" else (u_ljg, du_ljg)
        numeric = (float(u(1 + h, params)) - float(u(1 - h, params))) / (2 * h)
        derr.append(abs(numeric - float(du(1.0, params))))
    ok = max(errs) < 1e-12 and max(derr) < 1e-6
    assert record(10, ok, f"value error {max(errs):.1e}, derivative error at r=1 {max(derr):.1e}")


# --- 11. CLI determinism ---------------------------------------------------------------

TINY = ["--set", "model.width=8", "--set", "model.hidden=16", "--set", "model.n_blocks=2",
        "--set", "data.min_particles=256", "--set", "train.max_epochs=2", "--set", "train.accumulation=2",
        "--set", "train.train_batches=8", "--set", "train.val_batches=4", "--set", "data.clouds_per_class=20",
        "--set", "data.prototypes=cI2-W,cF4-Cu", "--set", "eval.snapshot_particles=128"]


def _snapshot_dir(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_11_cli_determinism(tmp_path):
    frames = [TrajectoryFrame(i, add_thermal_noise(replicate(build_prototype("cI2-W" if i < 4 else "cF4-Cu"), 64),
                                                   0.02, i)) for i in range(8)]
    write_trajectory(frames, tmp_path / "traj.xyz")
    out = tmp_path / "run"
    commands = [
        ["gen-data", "--task", "denoising"],
        ["train", "--task", "frame"],
        ["embed", "--checkpoint", str(out / "train" / "model.gala")],
        ["zero-shot", "--checkpoint", str(out / "train" / "model.gala")],
        ["featurize", "--method", "Q", "--method", "Radial"],
        ["transfer", "--set", "transfer.tasks=frame,shift", "--set", "transfer.replicas=2"],
        ["phase-hist", "--trajectory", str(tmp_path / "traj.xyz")],
        ["potential-table", "--name", "cF4-Cu"],
    ]
    runs, codes = [], []
    for _ in range(2):
        shutil.rmtree(out, ignore_errors=True)
        for cmd in commands:
            codes.append(cli_main(cmd + ["--seed", "5", "--threads", "1", "--out", str(out / cmd[0]), *TINY]))
        runs.append(_snapshot_dir(out))
    differing = sorted(k for k in runs[0] if runs[0][k] != runs[1].get(k)) + sorted(set(runs[1]) - set(runs[0]))
    ok = not differing and all(c == 0 for c in codes) and len(runs[0]) > 0
    assert record(11, ok, f"{len(runs[0])} files from {len(commands)} subcommands, "
                          f"{len(differing)} differ, exit codes {sorted(set(codes))}")
