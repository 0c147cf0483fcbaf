"""Oscillatory (OPP) and Lennard-Jones-Gauss (LJG) pair potentials, energy evaluation only."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

LJG_SIGMA = 0.02
LJG_CUTOFF = 2.5

# self-assembly parameter sets: (kind, k or r0, phi or epsilon)
PARAMETER_SETS = {
    "cF4-Cu": ("opp", 5.0, 2.8),
    "tP30-CrFe": ("opp", 8.5, 1.5),
    "cP54-K4Si23": ("opp", 8.5, 4.0),
    "icosahedral": ("opp", 7.5, 3.9),
    "cI2-W": ("ljg", 1.1, 3.0),
    "hP2-Mg": ("ljg", 1.8, 0.1),
}


@dataclass
class PotentialParams:
    kind: str
    k: float = 0.0
    phi: float = 0.0
    r0: float = 1.0
    epsilon: float = 0.0
    sigma: float = LJG_SIGMA
    cutoff: float | None = None

    def __post_init__(self):
        if self.kind not in ("opp", "ljg"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.kind == "ljg" and self.sigma <= 0:
            raise ValueError("LJG Gaussian width must be positive")
        if self.cutoff is None:
            self.cutoff = opp_default_cutoff(self.k, self.phi) if self.kind == "opp" else LJG_CUTOFF
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")

    @classmethod
    def named(cls, name: str, **overrides) -> "PotentialParams":
        if name not in PARAMETER_SETS:
            raise ValueError(f"unknown parameter set {name!r}; choose from {', '.join(PARAMETER_SETS)}")
        kind, a, b = PARAMETER_SETS[name]
        base = dict(kind="opp", k=a, phi=b) if kind == "opp" else dict(kind="ljg", r0=a, epsilon=b)
        return cls(**{**base, **overrides})


def _check_r(r):
    r = np.asarray(r, dtype=np.float64)
    if np.any(r <= 0):
        raise ValueError("pair distance must be positive")
    return r


def _opp_raw(r, k, phi):
    return r**-15 + np.cos(k * (r - 1) + phi) / r**3


def _opp_raw_deriv(r, k, phi):
    arg = k * (r - 1) + phi
    return -15 * r**-16 - k * np.sin(arg) / r**3 - 3 * np.cos(arg) / r**4


def opp_default_cutoff(k: float, phi: float, n_extrema: int = 3) -> float:
    """Radius of the third extremum of U_OPP beyond r = 1."""
    grid = np.linspace(1.0, 1.0 + 4 * n_extrema * math.pi / max(k, 1e-3) + 5.0, 20001)
    d = _opp_raw_deriv(grid, k, phi)
    roots = []
    for i in np.flatnonzero(np.sign(d[:-1]) * np.sign(d[1:]) < 0):
        roots.append(brentq(_opp_raw_deriv, grid[i], grid[i + 1], args=(k, phi), xtol=1e-14))
        if len(roots) == n_extrema:
            return float(roots[-1])
    raise ValueError(f"fewer than {n_extrema} extrema found for k={k}, phi={phi}")


def u_opp(r, params: PotentialParams):
    r = _check_r(r)
    return np.where(r < params.cutoff, _opp_raw(r, params.k, params.phi), 0.0)


def du_opp(r, params: PotentialParams):
    r = _check_r(r)
    return np.where(r < params.cutoff, _opp_raw_deriv(r, params.k, params.phi), 0.0)


def u_ljg(r, params: PotentialParams):
    # the constant 1/12 term follows the published form literally
    r = _check_r(r)
    gauss = params.epsilon * np.exp(-((r - params.r0) ** 2) / (2 * params.sigma**2))
    return np.where(r < params.cutoff, 1.0 / 12.0 - 2.0 / r**6 - gauss, 0.0)


def du_ljg(r, params: PotentialParams):
    r = _check_r(r)
    gauss = params.epsilon * np.exp(-((r - params.r0) ** 2) / (2 * params.sigma**2))
    return np.where(r < params.cutoff, 12.0 / r**7 + gauss * (r - params.r0) / params.sigma**2, 0.0)


def energy(r, params: PotentialParams):
    return u_opp(r, params) if params.kind == "opp" else u_ljg(r, params)


def force_derivative(r, params: PotentialParams):
    return du_opp(r, params) if params.kind == "opp" else du_ljg(r, params)


def potential_table(params: PotentialParams, r_min: float = 0.8, r_max: float | None = None,
                    n: int = 500) -> np.ndarray:
    """(n, 3) rows of r, U(r), dU/dr on an even grid."""
    r_max = params.cutoff if r_max is None else r_max
    r = np.linspace(r_min, r_max, n)
    return np.column_stack([r, energy(r, params), force_derivative(r, params)])
