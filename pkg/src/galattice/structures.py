"""Crystal prototypes, supercells, thermal noise, periodic neighbor clouds and file I/O."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .tasks import PointCloud

NOISE_LEVELS = (1e-2, 3e-2, 5e-2)
N_NEIGHBORS = 20
MIN_PARTICLES = 4096
SINGULAR_TOL = 1e-9


class StructureError(ValueError):
    pass


def derive_seed(global_seed: int, *parts) -> int:
    """Stable 63-bit seed from a global seed and any labels (name, noise level, replica)."""
    text = "\x1f".join(repr(p) for p in parts).encode()
    digest = hashlib.sha256(text).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    ss = np.random.SeedSequence([int(global_seed) & 0xFFFFFFFF, *words])
    return int(ss.generate_state(2, np.uint64)[0] >> np.uint64(1))


@dataclass
class UnitCell:
    name: str
    lattice: np.ndarray          # rows are cell vectors
    basis: np.ndarray            # fractional coordinates
    species: np.ndarray = None

    def __post_init__(self):
        self.lattice = np.asarray(self.lattice, dtype=np.float64).reshape(3, 3)
        self.basis = np.atleast_2d(np.asarray(self.basis, dtype=np.float64))
        if self.species is None:
            self.species = np.zeros(len(self.basis), dtype=np.int64)
        self.species = np.asarray(self.species, dtype=np.int64)
        if abs(np.linalg.det(self.lattice)) <= SINGULAR_TOL:
            raise StructureError(f"{self.name}: singular lattice (|det| <= {SINGULAR_TOL})")
        if self.basis.shape[1] != 3 or len(self.species) != len(self.basis):
            raise StructureError(f"{self.name}: basis must be (n, 3) with one species per site")
        if np.any(self.basis < 0) or np.any(self.basis >= 1):
            raise StructureError(f"{self.name}: fractional coordinate out of range [0, 1)")

    @property
    def n_sites(self) -> int:
        return len(self.basis)


@dataclass
class Configuration:
    box: np.ndarray
    positions: np.ndarray
    species: np.ndarray = None
    tag: str = ""

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64).reshape(3, 3)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.species is None:
            self.species = np.zeros(len(self.positions), dtype=np.int64)
        self.species = np.asarray(self.species, dtype=np.int64)
        if abs(np.linalg.det(self.box)) <= SINGULAR_TOL:
            raise StructureError("singular box matrix")
        if len(self.species) != len(self.positions):
            raise StructureError("one species index per particle is required")

    @property
    def n(self) -> int:
        return len(self.positions)

    def fractional(self) -> np.ndarray:
        return self.positions @ np.linalg.inv(self.box)

    def wrapped(self) -> "Configuration":
        frac = self.fractional()
        frac -= np.floor(frac)
        frac[frac >= 1.0] -= 1.0
        return Configuration(self.box, frac @ self.box, self.species.copy(), self.tag)


@dataclass
class TrajectoryFrame:
    index: int
    config: Configuration
    tag: float | None = None


# --- prototypes ---------------------------------------------------------------

def _hexagonal(a, c):
    return [[a, 0, 0], [-a / 2, a * math.sqrt(3) / 2, 0], [0, 0, c]]


def _centered(sites, shifts):
    return [np.mod(np.add(s, t), 1.0) for t in shifts for s in sites]


def _li_sites(x):
    # I-43d, Wyckoff 16c
    base = [
        (x, x, x), (-x + .5, -x, x + .5), (-x, x + .5, -x + .5), (x + .5, -x + .5, -x),
        (x + .75, x + .25, -x + .25), (-x + .75, -x + .75, -x + .75),
        (x + .25, -x + .25, x + .75), (-x + .25, x + .75, x + .25),
    ]
    return _centered(base, [(0, 0, 0), (.5, .5, .5)])


def _ga_sites(y, z):
    # Cmce, Wyckoff 8f
    base = [(0, y, z), (0, -y, -z), (0, -y + .5, z + .5), (0, y + .5, -z + .5)]
    return _centered(base, [(0, 0, 0), (.5, .5, 0)])


def _se_sites(x):
    # P3_121, Wyckoff 3a
    return [np.mod(s, 1.0) for s in [(x, 0, 1 / 3), (0, x, 2 / 3), (-x, -x, 0)]]


PROTOTYPES = {
    "cP1-Po": (np.eye(3), [(0, 0, 0)]),
    "cI2-W": (np.eye(3), [(0, 0, 0), (.5, .5, .5)]),
    "cF4-Cu": (np.eye(3), [(0, 0, 0), (0, .5, .5), (.5, 0, .5), (.5, .5, 0)]),
    "cF8-C": (np.eye(3), _centered([(0, 0, 0), (.25, .25, .25)],
                                   [(0, 0, 0), (0, .5, .5), (.5, 0, .5), (.5, .5, 0)])),
    "hP2-Mg": (_hexagonal(1.0, math.sqrt(8 / 3)), [(1 / 3, 2 / 3, .25), (2 / 3, 1 / 3, .75)]),
    "cI16-Li": (np.eye(3), _li_sites(0.05)),
    "tI2-In": (np.diag([1.0, 1.0, 1.52]), [(0, 0, 0), (.5, .5, .5)]),
    "hP3-Se": (_hexagonal(1.0, 1.1347), _se_sites(0.2254)),
    "oC8-Ga": (np.diag([4.5192, 7.6586, 4.5258]), _ga_sites(0.1549, 0.0810)),
    "tI4-Sn": (np.diag([1.0, 1.0, 0.5456]), _centered([(0, 0, 0), (0, .5, .25)], [(0, 0, 0), (.5, .5, .5)])),
}


def nearest_distance(lattice: np.ndarray, basis: np.ndarray) -> float:
    """Smallest distance between distinct periodic sites (brute force over 5^3 images)."""
    cart = basis @ lattice
    r = np.arange(-2, 3)
    shifts = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3) @ lattice
    d = cart[None, :, None, :] + shifts[None, None] - cart[:, None, None, :]
    dist = np.sqrt((d * d).sum(-1))
    dist[dist < 1e-9] = np.inf
    return float(dist.min())


def build_prototype(name: str, a: float = 1.0) -> UnitCell:
    """Built-in prototype cell, scaled so the nearest-neighbor distance equals ``a``."""
    if name not in PROTOTYPES:
        raise StructureError(f"unknown prototype {name!r}; built-ins: {', '.join(PROTOTYPES)}")
    lattice, sites = PROTOTYPES[name]
    lattice = np.asarray(lattice, dtype=np.float64)
    basis = np.asarray(sites, dtype=np.float64)
    basis = np.unique(np.round(basis, 12) % 1.0, axis=0)
    lattice = lattice * (a / nearest_distance(lattice, basis))
    return UnitCell(name, lattice, basis)


def replication_counts(cell: UnitCell, min_particles: int) -> tuple[int, int, int]:
    """Smallest near-cubic (n_a, n_b, n_c) with n_a n_b n_c * sites >= min_particles.

    Counts are ceil(E / |a_i|) for a common target edge E, scanned upward over
    the edge lengths at which some count changes.
    """
    if min_particles < 1:
        raise ValueError("min_particles must be >= 1")
    lengths = np.linalg.norm(cell.lattice, axis=1)
    m = (min_particles / cell.n_sites) ** (1 / 3)
    kmax = math.ceil(m * lengths.max() / lengths.min()) + 1
    for edge in sorted(k * L for L in lengths for k in range(1, kmax + 1)):
        counts = tuple(max(1, math.ceil(edge / L - 1e-9)) for L in lengths)
        if math.prod(counts) * cell.n_sites >= min_particles:
            return counts
    raise AssertionError("unreachable: the largest edge always suffices")


def replicate(cell: UnitCell, min_particles: int = MIN_PARTICLES) -> Configuration:
    counts = replication_counts(cell, min_particles)
    grid = np.stack(np.meshgrid(*[np.arange(c) for c in counts], indexing="ij"), -1).reshape(-1, 3)
    frac = (grid[:, None, :] + cell.basis[None]) / np.asarray(counts)
    species = np.tile(cell.species, len(grid))
    box = cell.lattice * np.asarray(counts)[:, None]
    return Configuration(box, frac.reshape(-1, 3) @ box, species, tag=f"{cell.name}")


def add_thermal_noise(config: Configuration, std: float, seed) -> Configuration:
    if std < 0:
        raise ValueError(f"noise std must be non-negative, got {std}")
    if std == 0:
        return Configuration(config.box, config.positions.copy(), config.species.copy(), config.tag)
    rng = np.random.default_rng(seed)
    moved = config.positions + rng.normal(scale=std, size=config.positions.shape)
    noisy = Configuration(config.box, moved, config.species.copy(), f"{config.tag}@{std:g}")
    return noisy.wrapped()


# --- neighbors ----------------------------------------------------------------

IMAGE_SHIFTS = np.stack(np.meshgrid(*[np.arange(-1, 2)] * 3, indexing="ij"), -1).reshape(-1, 3)


def _lengths(d: np.ndarray) -> np.ndarray:
    return np.sqrt((d * d).sum(-1))


def _order(dist: np.ndarray, index: np.ndarray) -> np.ndarray:
    # distances agreeing to ~1e-10 count as ties and fall back to particle index
    return np.lexsort((index, np.round(dist, 10)))


def knn_bruteforce(config: Configuration, center: int, k: int = N_NEIGHBORS) -> np.ndarray:
    """Reference implementation: minimum image over all 27 periodic images."""
    if k >= config.n:
        raise ValueError(f"k = {k} needs more than {config.n} particles")
    shifts = IMAGE_SHIFTS @ config.box
    d = (config.positions[:, None, :] + shifts[None]) - config.positions[center]
    dist = _lengths(d)
    best = np.argmin(dist, axis=1)
    idx = np.arange(config.n)
    disp, dmin = d[idx, best], dist[idx, best]
    keep = idx != center
    order = _order(dmin[keep], idx[keep])[:k]
    return disp[keep][order]


class NeighborFinder:
    """k-nearest-neighbor bond vectors under periodic boundaries.

    Particles are tiled over the 27 neighboring images and indexed with a
    KD-tree; each neighbor's displacement is its nearest image.
    """

    def __init__(self, config: Configuration):
        self.config = config
        shifts = IMAGE_SHIFTS @ config.box
        self.shifts = shifts
        tiled = config.positions[None, :, :] + shifts[:, None, :]
        self.tree = cKDTree(tiled.reshape(-1, 3))

    def cloud(self, center: int, k: int = N_NEIGHBORS) -> np.ndarray:
        n = self.config.n
        if k >= n:
            raise ValueError(f"k = {k} needs more than {n} particles")
        pos = self.config.positions
        q = min(27 * n, k + 9)
        while True:
            radii, hits = self.tree.query(pos[center], k=q)
            particle = hits % n
            d = (pos[particle] + self.shifts[hits // n]) - pos[center]
            dist = _lengths(d)
            # nearest image per particle, self removed
            first = np.lexsort((dist, particle))
            particle, d, dist = particle[first], d[first], dist[first]
            unique = np.r_[True, particle[1:] != particle[:-1]] & (particle != center)
            particle, d, dist = particle[unique], d[unique], dist[unique]
            order = _order(dist, particle)
            # unseen particles lie at or beyond the last hit, so the k-th must be strictly closer
            if q == 27 * n or (len(order) >= k and np.round(dist[order[k - 1]], 10) < np.round(radii[-1], 10)):
                return d[order[:k]]
            q = min(27 * n, 2 * q)

    def all_clouds(self, k: int = N_NEIGHBORS, centers=None) -> np.ndarray:
        centers = range(self.config.n) if centers is None else centers
        return np.stack([self.cloud(int(c), k) for c in centers])


def knn_cloud(config: Configuration, center: int, k: int = N_NEIGHBORS) -> PointCloud:
    bonds = NeighborFinder(config).cloud(center, k)
    return PointCloud(bonds)


# --- files -----------------------------------------------------------------

STRUCTURE_FIELDS = ("name", "lattice", "basis", "species")


def write_structure(cell: UnitCell, path) -> None:
    lines = [f"name {cell.name}", "lattice " + " ".join(repr(float(x)) for x in cell.lattice.ravel())]
    lines += ["basis " + " ".join(repr(float(x)) for x in site) for site in cell.basis]
    lines.append("species " + " ".join(str(int(s)) for s in cell.species))
    Path(path).write_text("\n".join(lines) + "\n")


def _floats(values, what, path, lineno):
    try:
        return [float(v) for v in values]
    except ValueError:
        raise StructureError(f"{path}:{lineno}: malformed number in {what}") from None


def load_structure(path) -> UnitCell:
    """Parse a one-record structure file (``name``/``lattice``/``basis``/``species`` lines)."""
    name, lattice, basis, species = None, None, [], None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(" ")
        values = rest.split()
        if key not in STRUCTURE_FIELDS:
            raise StructureError(f"{path}:{lineno}: unknown field {key!r}")
        if key == "name":
            name = rest.strip()
        elif key == "lattice":
            lattice = _floats(values, "lattice", path, lineno)
            if len(lattice) != 9:
                raise StructureError(f"{path}:{lineno}: lattice needs 9 numbers, got {len(lattice)}")
        elif key == "basis":
            site = _floats(values, "basis", path, lineno)
            if len(site) != 3:
                raise StructureError(f"{path}:{lineno}: basis site needs 3 numbers")
            basis.append(site)
        else:
            try:
                species = [int(v) for v in values]
            except ValueError:
                raise StructureError(f"{path}:{lineno}: malformed species index") from None
    if name is None or lattice is None or not basis:
        raise StructureError(f"{path}: name, lattice and at least one basis line are required")
    return UnitCell(name, np.array(lattice), np.array(basis), species)


def write_trajectory(frames, path) -> None:
    out = []
    for frame in frames:
        c = frame.config
        comment = "box=" + ",".join(repr(float(x)) for x in c.box.ravel())
        if frame.tag is not None:
            comment += f" tag={float(frame.tag)!r}"
        out += [str(c.n), comment]
        out += [f"{s} {x!r} {y!r} {z!r}" for s, (x, y, z) in zip(c.species, c.positions.tolist())]
    Path(path).write_text("\n".join(out) + "\n")


def load_trajectory(path) -> list[TrajectoryFrame]:
    """Extended-XYZ frames: count line, ``box=...`` comment (optional ``tag=``), atom lines."""
    lines = Path(path).read_text().splitlines()
    frames = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            count = int(lines[i])
        except ValueError:
            raise StructureError(f"{path}:{i + 1}: expected an atom count") from None
        if i + 2 + count > len(lines):
            raise StructureError(f"{path}:{i + 1}: frame truncated")
        box, tag = None, None
        for token in lines[i + 1].split():
            key, sep, value = token.partition("=")
            if not sep or key not in ("box", "tag"):
                raise StructureError(f"{path}:{i + 2}: unknown comment field {key!r}")
            if key == "box":
                box = _floats(value.split(","), "box", path, i + 2)
                if len(box) != 9:
                    raise StructureError(f"{path}:{i + 2}: box needs 9 numbers")
            else:
                (tag,) = _floats([value], "tag", path, i + 2)
        if box is None:
            raise StructureError(f"{path}:{i + 2}: missing box=")
        species, positions = [], []
        for j in range(i + 2, i + 2 + count):
            parts = lines[j].split()
            if len(parts) != 4:
                raise StructureError(f"{path}:{j + 1}: atom line needs species x y z")
            try:
                species.append(int(parts[0]))
            except ValueError:
                raise StructureError(f"{path}:{j + 1}: malformed species index") from None
            positions.append(_floats(parts[1:], "position", path, j + 1))
        config = Configuration(np.array(box), np.array(positions).reshape(-1, 3), species,
                               tag=f"{Path(path).name}#{len(frames)}")
        frames.append(TrajectoryFrame(len(frames), config.wrapped(), tag))
        i += 2 + count
    return frames
