"""Boxes, node lattices and lattice functions shared by metric, functional, pde and harnack."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid

from ..errors import DimensionError, HormlabError


def _floats(values: Sequence[float]) -> tuple[float, ...]:
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class Box:
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "lower", _floats(self.lower))
        object.__setattr__(self, "upper", _floats(self.upper))
        if len(self.lower) != len(self.upper):
            raise DimensionError("box bounds have different lengths")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise HormlabError(f"box needs lower < upper componentwise, got {self.lower} / {self.upper}")

    @classmethod
    def around(cls, center: Sequence[float], half_widths: Sequence[float]) -> "Box":
        c, w = np.asarray(center, dtype=float), np.asarray(half_widths, dtype=float)
        return cls(tuple(c - w), tuple(c + w))

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def widths(self) -> np.ndarray:
        return np.subtract(self.upper, self.lower)

    @property
    def half_widths(self) -> np.ndarray:
        return self.widths / 2.0

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    @property
    def radius_bound(self) -> float:
        """Default admissible radius R: a quarter of the smallest half-width."""
        return float(self.half_widths.min() / 4.0)

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return np.all((pts >= self.lower) & (pts <= self.upper), axis=-1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.asarray(self.lower) + rng.random((n, self.dim)) * self.widths


@dataclass(frozen=True)
class Lattice:
    """Regular node lattice ``lower + index * spacing``; periodic lattices wrap after ``shape`` nodes.

    ``midpoint`` lattices carry cell midpoints and integrate by the midpoint
    rule; node lattices put their end nodes on the box faces and integrate by the
    trapezoidal rule.
    """

    lower: tuple[float, ...]
    spacing: tuple[float, ...]
    shape: tuple[int, ...]
    periodic: bool = False
    midpoint: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "lower", _floats(self.lower))
        object.__setattr__(self, "spacing", _floats(self.spacing))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if not (len(self.lower) == len(self.spacing) == len(self.shape)):
            raise DimensionError("lattice lower/spacing/shape lengths differ")
        if any(h <= 0 or not np.isfinite(h) for h in self.spacing):
            raise HormlabError(f"lattice spacing must be positive, got {self.spacing}")
        if any(s < 2 for s in self.shape):
            raise HormlabError(f"lattice needs at least two nodes per axis, got {self.shape}")

    @classmethod
    def centered(cls, origin: Sequence[float], spacing: Sequence[float], half_counts: Sequence[int]) -> "Lattice":
        """Lattice with ``origin`` as a node and ``half_counts[j]`` nodes on either side of it."""
        o, h = np.asarray(origin, dtype=float), np.asarray(spacing, dtype=float)
        k = np.asarray(half_counts, dtype=int)
        return cls(tuple(o - k * h), tuple(h), tuple(2 * k + 1))

    @classmethod
    def around(cls, origin: Sequence[float], box: Box, spacing: Sequence[float]) -> "Lattice":
        """Nodes of the ``origin``-aligned lattice lying in ``box``."""
        o, h = np.asarray(origin, dtype=float), np.asarray(spacing, dtype=float)
        below = np.floor((o - np.asarray(box.lower)) / h + 1e-9).astype(int)
        above = np.floor((np.asarray(box.upper) - o) / h + 1e-9).astype(int)
        return cls(tuple(o - below * h), tuple(h), tuple(below + above + 1))

    @classmethod
    def cell_centered(cls, box: Box, counts: Sequence[int], periodic: bool = False) -> "Lattice":
        """Cell midpoints of a ``counts``-cell subdivision of ``box``; quadrature on it is the midpoint rule."""
        h = box.widths / np.asarray(counts, dtype=float)
        return cls(tuple(np.asarray(box.lower) + h / 2), tuple(h), tuple(counts), periodic, midpoint=True)

    @classmethod
    def spanning(cls, box: Box, counts: Sequence[int]) -> "Lattice":
        """``counts`` nodes per axis with the first and last on the box faces."""
        n = np.asarray(counts, dtype=int)
        h = box.widths / (n - 1)
        return cls(box.lower, tuple(h), tuple(n))

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def upper(self) -> tuple[float, ...]:
        return tuple(lo + (n - 1) * h for lo, n, h in zip(self.lower, self.shape, self.spacing))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def nodal(self) -> bool:
        return not (self.periodic or self.midpoint)

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Integral over the lattice of the trailing ``dim`` axes of ``values``."""
        values = np.asarray(values, dtype=float)
        if not self.nodal:
            return values.sum(axis=tuple(range(-self.dim, 0))) * self.cell_volume
        for h in reversed(self.spacing):
            values = trapezoid(values, dx=h, axis=-1)
        return values

    @property
    def box(self) -> Box:
        return Box(self.lower, self.upper)

    def axes(self) -> list[np.ndarray]:
        return [lo + h * np.arange(n) for lo, h, n in zip(self.lower, self.spacing, self.shape)]

    def points(self) -> np.ndarray:
        """Node coordinates in C order: array (size, dim)."""
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def mesh(self) -> np.ndarray:
        """Node coordinates shaped (*shape, dim)."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def nearest_index(self, points: np.ndarray) -> np.ndarray:
        """Multi-index of the nearest node, clipped to the lattice: integer array (..., dim)."""
        pts = np.asarray(points, dtype=float)
        idx = np.rint((pts - np.asarray(self.lower)) / np.asarray(self.spacing)).astype(np.int64)
        return np.clip(idx, 0, np.asarray(self.shape) - 1)

    def flat_index(self, multi: np.ndarray) -> np.ndarray:
        multi = np.asarray(multi, dtype=np.int64)
        return np.ravel_multi_index(tuple(np.moveaxis(multi, -1, 0)), self.shape)

    def node(self, multi: Sequence[int]) -> np.ndarray:
        return np.asarray(self.lower) + np.asarray(multi) * np.asarray(self.spacing)

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        if self.periodic:
            return mask
        for axis in range(self.dim):
            index = [slice(None)] * self.dim
            index[axis] = 0
            mask[tuple(index)] = True
            index[axis] = -1
            mask[tuple(index)] = True
        return mask

    def same_as(self, other: "Lattice") -> bool:
        return (
            self.shape == other.shape
            and self.periodic == other.periodic
            and self.midpoint == other.midpoint
            and np.allclose(self.lower, other.lower)
            and np.allclose(self.spacing, other.spacing)
        )


# ── Finite differences ────────────────────────────────────────────────────────

def partial(values: np.ndarray, lattice: Lattice, axis: int) -> np.ndarray:
    """∂_axis by centered differences; second-order one-sided on non-periodic faces."""
    h = lattice.spacing[axis]
    if lattice.periodic:
        return (np.roll(values, -1, axis=axis) - np.roll(values, 1, axis=axis)) / (2.0 * h)
    return np.gradient(values, h, axis=axis, edge_order=2)


def apply_field(coefficients: np.ndarray, values: np.ndarray, lattice: Lattice) -> np.ndarray:
    """Σ_j a_j ∂_j u for nodal coefficient arrays ``coefficients`` of shape (*shape, dim)."""
    out = np.zeros(lattice.shape)
    for axis in range(lattice.dim):
        a = coefficients[..., axis]
        if np.any(a != 0):
            out = out + a * partial(values, lattice, axis)
    return out


# ── Lattice functions ─────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class GridFunction:
    lattice: Lattice
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.lattice.shape:
            raise DimensionError(f"values of shape {values.shape} do not match lattice {self.lattice.shape}")
        if not np.all(np.isfinite(values)):
            raise HormlabError("grid function values must be finite")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_callable(cls, lattice: Lattice, fn) -> "GridFunction":
        pts = lattice.mesh()
        return cls(lattice, np.broadcast_to(fn(pts), lattice.shape).astype(float))

    def integral(self, mask: Optional[np.ndarray] = None) -> float:
        vals = self.values if mask is None else np.where(mask, self.values, 0.0)
        return float(self.lattice.integrate(vals))

    def with_values(self, values: np.ndarray) -> "GridFunction":
        return GridFunction(self.lattice, values)


@dataclass(frozen=True, eq=False)
class SpaceTimeGridFunction:
    """Time-ordered slices ``values[k]`` at ``t0 + k * tau`` on a common lattice."""

    lattice: Lattice
    values: np.ndarray = field(repr=False)
    tau: float
    t0: float = 0.0

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != self.lattice.dim + 1 or values.shape[1:] != self.lattice.shape:
            raise DimensionError(f"slices of shape {values.shape[1:]} do not match lattice {self.lattice.shape}")
        if values.shape[0] < 2:
            raise HormlabError("a space-time function needs at least two slices")
        if not self.tau > 0:
            raise HormlabError(f"tau must be positive, got {self.tau}")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_slices(cls, slices: Sequence[GridFunction], tau: float, t0: float = 0.0) -> "SpaceTimeGridFunction":
        if not slices:
            raise HormlabError("no slices given")
        lattice = slices[0].lattice
        if any(not s.lattice.same_as(lattice) for s in slices):
            raise DimensionError("all slices must share one lattice")
        return cls(lattice, np.stack([s.values for s in slices]), tau, t0)

    @property
    def n_slices(self) -> int:
        return int(self.values.shape[0])

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.tau * np.arange(self.n_slices)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def slice(self, k: int) -> GridFunction:
        return GridFunction(self.lattice, self.values[k])

    def __iter__(self) -> Iterator[GridFunction]:
        return (self.slice(k) for k in range(self.n_slices))
