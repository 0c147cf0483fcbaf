"""Geometric algebra of three-dimensional Euclidean space.

Components are always stored in the canonical order
``(1, e1, e2, e3, e12, e13, e23, e123)``. Both a small value type
(:class:`Multivector`) for exact scalar work and batched torch kernels for
the networks are provided; they share one multiplication table.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

BLADES: tuple[tuple[int, ...], ...] = (
    (),
    (1,),
    (2,),
    (3,),
    (1, 2),
    (1, 3),
    (2, 3),
    (1, 2, 3),
)
BLADE_NAMES = ("1", "e1", "e2", "e3", "e12", "e13", "e23", "e123")
GRADE_OF = np.array([len(b) for b in BLADES])
_INDEX = {b: i for i, b in enumerate(BLADES)}


def _blade_product(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[float, tuple[int, ...]]:
    """Product of two basis blades in signature (+,+,+): (sign, blade)."""
    factors = list(a) + list(b)
    sign = 1.0
    # bubble sort, counting transpositions; equal neighbours square to +1
    changed = True
    while changed:
        changed = False
        i = 0
        while i < len(factors) - 1:
            if factors[i] > factors[i + 1]:
                factors[i], factors[i + 1] = factors[i + 1], factors[i]
                sign = -sign
                changed = True
            elif factors[i] == factors[i + 1]:
                del factors[i : i + 2]
                changed = True
                continue
            i += 1
    return sign, tuple(factors)


def _build_cayley() -> np.ndarray:
    table = np.zeros((8, 8, 8))
    for i, a in enumerate(BLADES):
        for j, b in enumerate(BLADES):
            sign, blade = _blade_product(a, b)
            table[i, j, _INDEX[blade]] = sign
    return table


#: CAYLEY[i, j, k] is the coefficient of blade k in blade_i * blade_j.
CAYLEY = _build_cayley()
REVERSE_SIGNS = np.array([1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0])


class Multivector:
    """An element of Cl(3,0) with eight float64 components."""

    __slots__ = ("values",)

    def __init__(self, values: Sequence[float] | np.ndarray = (0.0,) * 8):
        arr = np.array(values, dtype=np.float64).reshape(-1)
        if arr.shape != (8,):
            raise ValueError(f"a multivector has 8 components, got {arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("multivector components must be finite")
        self.values = arr

    @classmethod
    def from_parts(cls, s: float = 0.0, v=(0.0, 0.0, 0.0), b=(0.0, 0.0, 0.0), t: float = 0.0):
        return cls(np.concatenate([[s], v, b, [t]]))

    @classmethod
    def scalar(cls, s: float) -> "Multivector":
        return cls.from_parts(s=s)

    @classmethod
    def vector(cls, v) -> "Multivector":
        return cls.from_parts(v=v)

    @classmethod
    def basis(cls, name: str) -> "Multivector":
        values = np.zeros(8)
        values[BLADE_NAMES.index(name)] = 1.0
        return cls(values)

    @property
    def s(self) -> float:
        return float(self.values[0])

    @property
    def v(self) -> np.ndarray:
        return self.values[1:4].copy()

    @property
    def b(self) -> np.ndarray:
        return self.values[4:7].copy()

    @property
    def t(self) -> float:
        return float(self.values[7])

    def grade(self, k: int) -> "Multivector":
        return grade(self, k)

    def reverse(self) -> "Multivector":
        return Multivector(self.values * REVERSE_SIGNS)

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.values, self.values)))

    def __add__(self, other):
        if isinstance(other, Multivector):
            return Multivector(self.values + other.values)
        return self + Multivector.scalar(float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Multivector):
            return Multivector(self.values - other.values)
        return self - Multivector.scalar(float(other))

    def __neg__(self):
        return Multivector(-self.values)

    def __mul__(self, other):
        if isinstance(other, Multivector):
            return geometric_product(self, other)
        return Multivector(self.values * float(other))

    def __rmul__(self, other):
        return Multivector(self.values * float(other))

    def __eq__(self, other):
        return isinstance(other, Multivector) and np.array_equal(self.values, other.values)

    def __repr__(self):
        terms = [f"{c:g}*{n}" for c, n in zip(self.values, BLADE_NAMES) if c != 0.0]
        return "Multivector(" + (" + ".join(terms) or "0") + ")"


def geometric_product(a: Multivector, b: Multivector) -> Multivector:
    return Multivector(np.einsum("i,j,ijk->k", a.values, b.values, CAYLEY))


def grade(a: Multivector, k: int) -> Multivector:
    if k not in (0, 1, 2, 3):
        raise ValueError(f"grade index must be in 0..3, got {k!r}")
    return Multivector(np.where(GRADE_OF == k, a.values, 0.0))


def invariants(a: Multivector) -> np.ndarray:
    """(scalar, |vector|, |bivector|, trivector) of one multivector."""
    x = a.values
    return np.array([x[0], np.linalg.norm(x[1:4]), np.linalg.norm(x[4:7]), x[7]])


def invariants_pair(a: Multivector, b: Multivector) -> np.ndarray:
    """12 rotation-invariant attributes: invariants of a, of b and of a*b."""
    return np.concatenate([invariants(a), invariants(b), invariants(a * b)])


@dataclass(frozen=True)
class Rotor:
    """Unit even-grade multivector ``s + b`` acting by ``R a ~R``."""

    s: float
    b: tuple[float, float, float]

    def __post_init__(self):
        norm2 = self.s**2 + sum(x * x for x in self.b)
        if abs(norm2 - 1.0) > 1e-12:
            raise ValueError(f"rotor must have unit norm, got |R|^2 = {norm2!r}")

    def as_multivector(self) -> Multivector:
        return Multivector.from_parts(s=self.s, b=self.b)

    def compose(self, first: "Rotor") -> "Rotor":
        """Rotor applying ``first`` and then ``self``."""
        prod = self.as_multivector() * first.as_multivector()
        s, b = prod.s, prod.b
        n = np.sqrt(s * s + b @ b)
        return Rotor(float(s / n), tuple(float(x) for x in b / n))

    def matrix(self) -> np.ndarray:
        """3x3 rotation matrix acting on column vectors."""
        cols = [apply_rotor(self, Multivector.vector(e)).v for e in np.eye(3)]
        return np.stack(cols, axis=1)


def rotor_from_axis_angle(axis, angle: float) -> Rotor:
    axis = np.asarray(axis, dtype=np.float64)
    if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
        raise ValueError(f"rotation axis must be a unit vector, |axis| = {np.linalg.norm(axis)!r}")
    axis = axis / np.linalg.norm(axis)
    # plane bivector dual to the axis, in (e12, e13, e23) order
    plane = np.array([axis[2], -axis[1], axis[0]])
    half = 0.5 * angle
    return Rotor(float(np.cos(half)), tuple(float(x) for x in -np.sin(half) * plane))


def apply_rotor(r: Rotor, a: Multivector) -> Multivector:
    rm = r.as_multivector()
    return rm * a * rm.reverse()


def random_rotor(rng: np.random.Generator) -> Rotor:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return Rotor(float(q[0]), (float(q[1]), float(q[2]), float(q[3])))


# --- batched torch kernels -------------------------------------------------

_CAYLEY_FLAT = CAYLEY.reshape(64, 8)
_cache: dict = {}


def _cayley_like(x: torch.Tensor) -> torch.Tensor:
    key = (x.dtype, x.device)
    if key not in _cache:
        _cache[key] = torch.as_tensor(_CAYLEY_FLAT, dtype=x.dtype, device=x.device)
    return _cache[key]


def vectors_to_mv(vectors: torch.Tensor) -> torch.Tensor:
    """Embed (..., 3) vectors as (..., 8) multivectors."""
    zeros = vectors.new_zeros(vectors.shape[:-1] + (1,))
    pad = vectors.new_zeros(vectors.shape[:-1] + (4,))
    return torch.cat([zeros, vectors, pad], dim=-1)


def gp(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Geometric product of broadcastable (..., 8) tensors."""
    a, b = torch.broadcast_tensors(a, b)
    outer = (a.unsqueeze(-1) * b.unsqueeze(-2)).flatten(-2)
    return outer @ _cayley_like(outer)


def safe_norm(x: torch.Tensor, dim: int = -1, keepdim: bool = False) -> torch.Tensor:
    """Euclidean norm whose gradient at the origin is zero instead of NaN."""
    sq = (x * x).sum(dim=dim, keepdim=keepdim)
    positive = sq > 0
    root = torch.sqrt(torch.where(positive, sq, torch.ones_like(sq)))
    return torch.where(positive, root, torch.zeros_like(sq))


def mv_invariants(x: torch.Tensor) -> torch.Tensor:
    """(..., 8) -> (..., 4): scalar, |vector|, |bivector|, trivector."""
    return torch.stack(
        [x[..., 0], safe_norm(x[..., 1:4]), safe_norm(x[..., 4:7]), x[..., 7]], dim=-1
    )


def mv_norm(x: torch.Tensor) -> torch.Tensor:
    return safe_norm(x, dim=-1)


def rotate_mv(x: torch.Tensor, r: Rotor) -> torch.Tensor:
    """Apply a rotor to every (..., 8) multivector of a tensor."""
    rm = torch.as_tensor(r.as_multivector().values, dtype=x.dtype)
    rr = torch.as_tensor(r.as_multivector().reverse().values, dtype=x.dtype)
    return gp(gp(rm, x), rr)
