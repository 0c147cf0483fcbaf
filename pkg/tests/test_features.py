import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation
from scipy.special import sph_harm_y

from galattice import features as F
from galattice.structures import NeighborFinder, build_prototype, replicate

FCC = np.array([p for p in itertools.product([-1, 0, 1], repeat=3) if sum(map(abs, p)) == 2], float)
BCC = np.array(list(itertools.product([-1, 1], repeat=3)), float)


def oracle_q(dirs, l):
    """Direct summation with scipy's harmonics."""
    d = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    theta, phi = np.arccos(d[:, 2]), np.arctan2(d[:, 1], d[:, 0])
    total = sum(abs(np.mean(sph_harm_y(l, m, theta, phi))) ** 2 for m in range(-l, l + 1))
    return math.sqrt(4 * math.pi / (2 * l + 1) * total)


def random_cloud(seed, k=20):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(k, 3))


def test_sph_harm_against_scipy():
    rng = np.random.default_rng(0)
    dirs = rng.normal(size=(50, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    table = F.sph_harm_table(dirs)
    theta, phi = np.arccos(dirs[:, 2]), np.arctan2(dirs[:, 1], dirs[:, 0])
    for l in range(13):
        for m in range(-l, l + 1):
            assert np.max(np.abs(table[:, l, m + 12] - sph_harm_y(l, m, theta, phi))) < 1e-12


def test_sph_harm_examples():
    assert F.sph_harm(0, 0, [0.6, 0, 0.8]) == pytest.approx(1 / math.sqrt(4 * math.pi), abs=1e-15)
    assert F.sph_harm(1, 0, [0, 0, 1]).real == pytest.approx(math.sqrt(3 / (4 * math.pi)), abs=1e-15)
    with pytest.raises(ValueError):
        F.sph_harm(2, 3, [0, 0, 1])
    with pytest.raises(ValueError):
        F.sph_harm(2, 0, [0, 0, 2])


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1), st.floats(-math.pi, math.pi))
def test_addition_theorem(z, phi):
    s = math.sqrt(max(0.0, 1 - z * z))
    row = F.sph_harm_table(np.array([s * math.cos(phi), s * math.sin(phi), z]))
    for l in range(13):
        assert abs(np.sum(np.abs(row[l]) ** 2) - (2 * l + 1) / (4 * math.pi)) < 1e-12


def test_steinhardt_crystal_values():
    assert abs(F.steinhardt_q(FCC, 6) - oracle_q(FCC, 6)) < 1e-10
    assert abs(F.steinhardt_q(BCC, 6) - oracle_q(BCC, 6)) < 1e-10
    assert F.steinhardt_q(FCC, 6) == pytest.approx(0.57452, abs=1e-5)
    assert F.steinhardt_q(FCC, 4) == pytest.approx(0.19094, abs=1e-5)
    assert F.steinhardt_q(BCC, 6) == pytest.approx(0.62854, abs=1e-5)
    for l in F.STEINHARDT_LS:
        assert F.steinhardt_q(FCC[:1], l) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        F.steinhardt_q(FCC, 6, n_neighbors=13)


def test_steinhardt_vector_layout():
    cloud = random_cloud(3)
    vec = F.steinhardt_vector(cloud)
    assert vec.shape == (102,)
    ordered = F.sorted_bonds(cloud)
    for i, n in enumerate(F.NEIGHBOR_COUNTS):
        for j, l in enumerate(F.STEINHARDT_LS):
            assert abs(vec[6 * i + j] - oracle_q(ordered[:n], l)) < 1e-10
    assert np.all((vec >= 0) & (vec <= 1 + 1e-12))


def test_dimensionalities():
    cloud = random_cloud(4)
    assert F.steinhardt_vector(cloud).shape == (102,)
    assert F.psi_features(cloud).shape == (2873,)
    assert F.radial_features(cloud).shape == (19,)
    assert F.DIMENSIONS == {"Q": 102, "Psi": 2873, "Radial": 19}


def test_psi_constant_harmonic():
    psi = F.psi_features(random_cloud(5)).reshape(17, 169)
    assert np.allclose(psi[:, 0], 1 / math.sqrt(4 * math.pi), atol=1e-14)


def test_rotation_invariance():
    clouds = [random_cloud(s) for s in range(3)]
    base = [(F.steinhardt_vector(c), F.psi_features(c, return_flags=True), F.radial_features(c)) for c in clouds]
    for r in Rotation.random(100, random_state=1):
        m = r.as_matrix()
        for c, (q, (psi, flags), rad) in zip(clouds, base):
            assert not any(flags)
            rot = c @ m.T
            assert np.max(np.abs(F.steinhardt_vector(rot) - q)) < 1e-8
            assert np.max(np.abs(F.radial_features(rot) - rad)) < 1e-8
            assert np.max(np.abs(F.psi_features(rot) - psi)) < 1e-8


def test_radial_examples():
    rng = np.random.default_rng(1)
    sphere = rng.normal(size=(20, 3))
    sphere /= np.linalg.norm(sphere, axis=1, keepdims=True)
    assert np.allclose(F.radial_features(sphere), 1.0, atol=1e-15)
    config = replicate(build_prototype("cF4-Cu"), 500)
    rad = F.radial_features(NeighborFinder(config).cloud(0))
    assert np.sum(np.abs(rad - 1) < 1e-9) == 11
    assert np.sum(np.abs(rad - math.sqrt(2)) < 1e-9) == 6
    assert np.sum(np.abs(rad - math.sqrt(3)) < 1e-9) == 2
    cloud = random_cloud(7)
    assert np.allclose(F.radial_features(10 * cloud), F.radial_features(cloud), atol=1e-14)
    with pytest.raises(ValueError):
        F.radial_features(np.vstack([np.zeros(3), cloud[:19]]))


def test_shell_shuffle_invariance():
    config = replicate(build_prototype("cF4-Cu"), 500)
    cloud = NeighborFinder(config).cloud(0)
    shuffled = cloud.copy()
    shuffled[:12] = cloud[:12][np.random.default_rng(0).permutation(12)]
    # prefixes that cut through the shell legitimately depend on the tie order
    complete = slice(6 * (12 - 4), None)
    assert np.allclose(F.steinhardt_vector(shuffled)[complete], F.steinhardt_vector(cloud)[complete], atol=1e-12)
    assert np.array_equal(F.radial_features(shuffled), F.radial_features(cloud))


def test_degenerate_frame_flagged():
    _, flags = F.psi_features(np.vstack([FCC, BCC]), return_flags=True)
    assert flags[-1]


def test_csv_export(tmp_path):
    m = np.array([[0.1, 1 / 3], [2.0, -1e-20]])
    F.write_matrix_csv(tmp_path / "f.csv", m, prefix="q")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "particle,q0,q1"
    assert np.array_equal(np.loadtxt(tmp_path / "f.csv", delimiter=",", skiprows=1)[:, 1:], m)
