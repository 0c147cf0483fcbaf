"""Classical rotation-invariant baselines: Steinhardt Q vector, |Psi| and radial features."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

L_MAX = 12
STEINHARDT_LS = (2, 4, 6, 8, 10, 12)
NEIGHBOR_COUNTS = tuple(range(4, 21))
DEGENERACY_TOL = 1e-9

DIMENSIONS = {"Q": len(STEINHARDT_LS) * len(NEIGHBOR_COUNTS),
              "Psi": (L_MAX + 1) ** 2 * len(NEIGHBOR_COUNTS),
              "Radial": 19}


def _norm_constants(lmax: int) -> np.ndarray:
    c = np.zeros((lmax + 1, lmax + 1))
    for l in range(lmax + 1):
        for m in range(l + 1):
            c[l, m] = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))
    return c


NORMS = _norm_constants(L_MAX)


def legendre_table(lmax: int, x: np.ndarray) -> np.ndarray:
    """Associated Legendre P_l^m(x), m >= 0, Condon-Shortley phase; shape (..., lmax+1, lmax+1).

    Upward recursion in l at fixed m, seeded by the closed-form P_m^m.
    """
    x = np.asarray(x, dtype=np.float64)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    p = np.zeros(x.shape + (lmax + 1, lmax + 1))
    pmm = np.ones_like(x)
    for m in range(lmax + 1):
        if m > 0:
            pmm = -(2 * m - 1) * s * pmm
        p[..., m, m] = pmm
        if m + 1 <= lmax:
            p[..., m + 1, m] = x * (2 * m + 1) * pmm
        for l in range(m + 2, lmax + 1):
            p[..., l, m] = (x * (2 * l - 1) * p[..., l - 1, m] - (l + m - 1) * p[..., l - 2, m]) / (l - m)
    return p


def sph_harm_table(directions: np.ndarray, lmax: int = L_MAX) -> np.ndarray:
    """Y_lm for all l <= lmax, m in [-l, l]; shape (..., lmax+1, 2 lmax+1), m stored at m + lmax."""
    d = np.asarray(directions, dtype=np.float64)
    p = legendre_table(lmax, d[..., 2])
    phi = np.arctan2(d[..., 1], d[..., 0])
    out = np.zeros(d.shape[:-1] + (lmax + 1, 2 * lmax + 1), dtype=np.complex128)
    m = np.arange(lmax + 1)
    phase = np.exp(1j * phi[..., None] * m)                  # (..., m)
    pos = NORMS[: lmax + 1, : lmax + 1] * p * phase[..., None, :]
    sign = (-1.0) ** m
    out[..., lmax:] = pos
    out[..., :lmax] = (sign[1:] * np.conj(pos[..., 1:]))[..., ::-1]
    mask = np.abs(np.arange(-lmax, lmax + 1))[None, :] <= np.arange(lmax + 1)[:, None]
    return np.where(mask, out, 0.0)


def sph_harm(l: int, m: int, direction) -> complex:
    """Orthonormal complex spherical harmonic Y_lm at a unit direction."""
    if not 0 <= l <= L_MAX:
        raise ValueError(f"degree l = {l} outside [0, {L_MAX}]")
    if abs(m) > l:
        raise ValueError(f"|m| = {abs(m)} exceeds l = {l}")
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    return complex(sph_harm_table(d, l)[l, m + l])


def _directions(bonds: np.ndarray) -> np.ndarray:
    r = np.linalg.norm(bonds, axis=-1, keepdims=True)
    if np.any(r < 1e-12):
        raise ValueError("zero-length bond has no direction")
    return bonds / r


def sorted_bonds(bonds) -> np.ndarray:
    bonds = np.asarray(bonds, dtype=np.float64)
    r = np.linalg.norm(bonds, axis=-1)
    return bonds[np.lexsort((np.arange(len(bonds)), r))]


def steinhardt_q(bonds, l: int, n_neighbors: int | None = None) -> float:
    bonds = np.asarray(bonds, dtype=np.float64)
    n = len(bonds) if n_neighbors is None else n_neighbors
    if n < 1 or len(bonds) < n:
        raise ValueError(f"need {n} neighbors, cloud has {len(bonds)}")
    y = sph_harm_table(_directions(bonds[:n]), l)[:, l].mean(axis=0)
    return float(math.sqrt(4 * math.pi / (2 * l + 1) * np.sum(np.abs(y) ** 2)))


def steinhardt_vector(bonds) -> np.ndarray:
    """q_l for l in (2, 4, ..., 12) and n = 4..20 nearest bonds, n-major; 102 values."""
    bonds = sorted_bonds(bonds)
    if len(bonds) < NEIGHBOR_COUNTS[-1]:
        raise ValueError(f"need {NEIGHBOR_COUNTS[-1]} neighbors, cloud has {len(bonds)}")
    y = sph_harm_table(_directions(bonds[: NEIGHBOR_COUNTS[-1]]))   # (20, l, m)
    csum = np.cumsum(y, axis=0)
    out = []
    for n in NEIGHBOR_COUNTS:
        power = np.sum(np.abs(csum[n - 1] / n) ** 2, axis=-1)
        out.extend(math.sqrt(4 * math.pi / (2 * l + 1) * power[l]) for l in STEINHARDT_LS)
    return np.asarray(out)


def inertia_frame(bonds: np.ndarray) -> tuple[np.ndarray, bool]:
    """Eigenvectors (columns, ascending eigenvalues) of the bond inertia tensor.

    Each eigenvector's largest-magnitude component is made positive. Returns
    the frame and a flag set when two eigenvalues coincide within tolerance.
    """
    r2 = np.sum(bonds * bonds, axis=1)
    tensor = np.eye(3) * r2.sum() - bonds.T @ bonds
    values, vectors = np.linalg.eigh(tensor)
    pivot = np.argmax(np.abs(vectors), axis=0)
    vectors = vectors * np.sign(vectors[pivot, np.arange(3)])
    degenerate = bool(np.any(np.diff(values) < DEGENERACY_TOL))
    if degenerate:
        vectors[:, 2] = np.cross(vectors[:, 0], vectors[:, 1])
    return vectors, degenerate


def psi_features(bonds, return_flags: bool = False):
    """|mean Y_lm| in the inertia eigenframe, l = 0..12, all m, for n = 4..20; 2873 values."""
    bonds = sorted_bonds(bonds)
    if len(bonds) < NEIGHBOR_COUNTS[-1]:
        raise ValueError(f"need {NEIGHBOR_COUNTS[-1]} neighbors, cloud has {len(bonds)}")
    mask = np.abs(np.arange(-L_MAX, L_MAX + 1))[None, :] <= np.arange(L_MAX + 1)[:, None]
    out, flags = [], []
    for n in NEIGHBOR_COUNTS:
        frame, degenerate = inertia_frame(bonds[:n])
        y = sph_harm_table(_directions(bonds[:n] @ frame)).mean(axis=0)
        out.append(np.abs(y[mask]))
        flags.append(degenerate)
    values = np.concatenate(out)
    return (values, flags) if return_flags else values


def radial_features(bonds) -> np.ndarray:
    """|r_n| / |r_1| for n = 2..20 over bonds sorted by length."""
    r = np.sort(np.linalg.norm(np.asarray(bonds, dtype=np.float64), axis=-1))
    if len(r) < 20:
        raise ValueError(f"need 20 neighbors, cloud has {len(r)}")
    if r[0] < 1e-12:
        raise ValueError("nearest bond has zero length")
    return r[1:20] / r[0]


FEATURIZERS = {"Q": steinhardt_vector, "Psi": psi_features, "Radial": radial_features}


def featurize(method: str, clouds) -> np.ndarray:
    if method not in FEATURIZERS:
        raise ValueError(f"unknown feature method {method!r}; choose from {', '.join(FEATURIZERS)}")
    fn = FEATURIZERS[method]
    rows = np.stack([fn(c) for c in clouds])
    assert rows.shape[1] == DIMENSIONS[method]
    return rows


def write_matrix_csv(path, matrix: np.ndarray, prefix: str = "f", index=None) -> None:
    """One row per particle; floats written with round-trip precision."""
    matrix = np.asarray(matrix)
    cols = ["particle"] + [f"{prefix}{j}" for j in range(matrix.shape[1])]
    index = range(len(matrix)) if index is None else index
    with open(Path(path), "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i, row in zip(index, matrix):
            fh.write(str(i) + "," + ",".join(repr(float(x)) for x in row) + "\n")
