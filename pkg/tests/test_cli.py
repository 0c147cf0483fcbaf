import csv
import subprocess
import sys

import pytest

from galattice.cli import main
from galattice.config import ConfigError, RunConfig, parse_config

TINY = ["--set", "model.width=8", "--set", "model.hidden=16", "--set", "model.n_blocks=2",
        "--set", "data.min_particles=256", "--set", "train.max_epochs=1", "--set", "train.accumulation=2",
        "--set", "train.train_batches=8", "--set", "train.val_batches=4"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().err


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_config_round_trip():
    cfg = RunConfig()
    cfg.set("train", "lr", "3e-4")
    cfg.set("data", "prototypes", "cI2-W, cF4-Cu")
    cfg.set("train", "freeze_core", "yes")
    back = parse_config(cfg.dumps())
    assert back == cfg
    assert back.data.prototypes == ("cI2-W", "cF4-Cu") and back.train.lr == 3e-4
    with pytest.raises(ConfigError, match="'train.bogus'"):
        cfg.set("train", "bogus", "1")
    with pytest.raises(ConfigError, match="bad value"):
        cfg.set("train", "max_epochs", "ten")
    with pytest.raises(ConfigError, match=":2:"):
        parse_config("[train]\nwhat\n")


def test_gen_data_is_byte_identical(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code, _ = run(capsys, "gen-data", "--prototype", "cI2-W", "--noise", "0.01", "--seed", 7,
                      "--clouds-per-class", 20, "--out", out, "--set", "data.min_particles=256")
        assert code == 0
        outs.append(out)
    files = sorted(p.name for p in (outs[0] / "dataset").iterdir())
    assert "manifest.txt" in files and "bonds.f64" in files
    for name in files:
        assert (outs[0] / "dataset" / name).read_bytes() == (outs[1] / "dataset" / name).read_bytes()
    resolved = [(o / "resolved.cfg").read_text().replace(str(o), "OUT") for o in outs]
    assert resolved[0] == resolved[1]


def test_unknown_key_exits_1(tmp_path, capsys):
    code, err = run(capsys, "train", "--out", tmp_path, "--set", "train.bogus=1")
    assert code == 1 and "train.bogus" in err and err.count("\n") == 1
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[model]\nwidht = 8\n")
    code, err = run(capsys, "train", "--config", cfg, "--out", tmp_path)
    assert code == 1 and "model.widht" in err
    code, err = run(capsys, "gen-data", "--prototype", "xX9-Nope", "--out", tmp_path)
    assert code == 1 and "xX9-Nope" in err


def test_runtime_failure_exits_2(tmp_path, capsys):
    code, err = run(capsys, "embed", "--checkpoint", tmp_path / "missing.gala", "--out", tmp_path)
    assert code == 2 and err.startswith("galattice: embed failed")


def test_threads_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("GALATTICE_THREADS", "3")
    run(capsys, "potential-table", "--out", tmp_path)
    assert "threads = 3" in (tmp_path / "resolved.cfg").read_text()
    run(capsys, "potential-table", "--out", tmp_path, "--threads", 1)
    assert "threads = 1" in (tmp_path / "resolved.cfg").read_text()
    monkeypatch.setenv("GALATTICE_THREADS", "many")
    assert run(capsys, "potential-table", "--out", tmp_path)[0] == 1


def test_train_embed_and_zero_shot(tmp_path, capsys):
    common = ["--prototype", "cI2-W", "--prototype", "cF4-Cu", "--clouds-per-class", 20, *TINY]
    assert run(capsys, "train", "--task", "frame", "--out", tmp_path / "t", *common)[0] == 0
    rows = read_csv(tmp_path / "t" / "history.csv")
    assert rows[0] == ["epoch", "train_loss", "val_metric", "lr", "val_loss"] and len(rows) == 2
    ckpt = tmp_path / "t" / "model.gala"
    assert run(capsys, "embed", "--checkpoint", ckpt, "--out", tmp_path / "e", *common)[0] == 0
    rows = read_csv(tmp_path / "e" / "embedding.csv")
    assert len(rows) == 41 and len(rows[0]) == 9
    assert run(capsys, "zero-shot", "--checkpoint", ckpt, "--out", tmp_path / "z",
               "--set", "eval.snapshot_particles=128")[0] == 0
    rows = read_csv(tmp_path / "z" / "zero_shot.csv")
    assert [r[1] for r in rows[1:]] == ["frame", "Q", "Radial"]
    assert all(0.5 <= float(r[2]) <= 1.0 for r in rows[1:])


def test_featurize_and_potential_table(tmp_path, capsys):
    code, _ = run(capsys, "featurize", "--prototype", "cF4-Cu", "--clouds-per-class", 3, "--method", "Q",
                  "--method", "Radial", "--out", tmp_path, "--set", "data.min_particles=256")
    assert code == 0
    assert len(read_csv(tmp_path / "features_Q.csv")[0]) == 103
    assert len(read_csv(tmp_path / "features_Radial.csv")) == 4
    assert run(capsys, "potential-table", "--name", "cI2-W", "--out", tmp_path)[0] == 0
    rows = read_csv(tmp_path / "potential_cI2-W.csv")
    assert rows[0] == ["r", "u", "du_dr"] and len(rows) == 501


def test_phase_hist(tmp_path, capsys):
    from galattice.structures import TrajectoryFrame, add_thermal_noise, build_prototype, replicate, write_trajectory

    frames = [TrajectoryFrame(i, add_thermal_noise(replicate(build_prototype("cI2-W" if i < 4 else "cF4-Cu"), 64),
                                                   0.02, i)) for i in range(8)]
    write_trajectory(frames, tmp_path / "traj.xyz")
    code, _ = run(capsys, "phase-hist", "--trajectory", tmp_path / "traj.xyz", "--out", tmp_path / "p", *TINY)
    assert code == 0
    rows = read_csv(tmp_path / "p" / "phase_hist.csv")
    assert len(rows) == 7
    assert (tmp_path / "p" / "model.gala").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "galattice", "potential-table", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert (tmp_path / "potential_icosahedral.csv").exists()
    proc = subprocess.run([sys.executable, "-m", "galattice", "nope"], capture_output=True, text=True)
    assert proc.returncode != 0
