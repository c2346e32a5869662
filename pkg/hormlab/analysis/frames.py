"""Polynomial vector fields, commutator tables, ε-rescaled families and λ_I determinants."""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache
from math import factorial
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import sympy as sp

from ..errors import DimensionError, HormanderFailure, HormlabError, ParseError
from ..grammar import default_variables, parse_expression

logger = logging.getLogger(__name__)

Scalar = Union[int, float, sp.Rational]

DEFAULT_C2 = 0.5
DEFAULT_EPSILON_BAR = 1.0


@lru_cache(maxsize=None)
def _gens(dim: int) -> tuple[sp.Symbol, ...]:
    return tuple(sp.symbols(f"x0:{dim}"))


def _exact(value: Scalar) -> sp.Rational:
    # floats are converted to their exact binary value, so ε = 1/64 stays exact
    return sp.Rational(value)


@dataclass(frozen=True)
class Polynomial:
    """A real polynomial in ``dim`` variables stored as canonical (coefficient, exponents) terms."""

    dim: int
    terms: tuple[tuple[sp.Rational, tuple[int, ...]], ...] = ()

    @classmethod
    def from_poly(cls, poly: sp.Poly) -> "Polynomial":
        terms = []
        for monom, coeff in poly.terms():
            coeff = sp.Rational(sp.sympify(coeff))
            if coeff != 0:
                terms.append((coeff, tuple(int(e) for e in monom)))
        terms.sort(key=lambda term: term[1])
        return cls(len(poly.gens), tuple(terms))

    @classmethod
    def from_expr(cls, expr: sp.Expr, dim: int) -> "Polynomial":
        return cls.from_poly(sp.Poly(sp.expand(expr), *_gens(dim), domain=sp.QQ))

    @classmethod
    def constant(cls, dim: int, value: Scalar) -> "Polynomial":
        value = _exact(value)
        return cls(dim, ((value, (0,) * dim),) if value != 0 else ())

    @classmethod
    def variable(cls, dim: int, axis: int) -> "Polynomial":
        exps = tuple(1 if j == axis else 0 for j in range(dim))
        return cls(dim, ((sp.Integer(1), exps),))

    def as_poly(self) -> sp.Poly:
        gens = _gens(self.dim)
        if not self.terms:
            return sp.Poly(0, *gens, domain=sp.QQ)
        return sp.Poly.from_dict({exps: coeff for coeff, exps in self.terms}, *gens, domain=sp.QQ)

    @property
    def is_zero(self) -> bool:
        return not self.terms

    @property
    def degree(self) -> int:
        return max((sum(exps) for _, exps in self.terms), default=0)

    def _check(self, other: "Polynomial") -> None:
        if other.dim != self.dim:
            raise DimensionError(f"polynomial dimensions differ: {self.dim} vs {other.dim}")

    def __add__(self, other: "Polynomial") -> "Polynomial":
        self._check(other)
        return Polynomial.from_poly(self.as_poly() + other.as_poly())

    def __sub__(self, other: "Polynomial") -> "Polynomial":
        self._check(other)
        return Polynomial.from_poly(self.as_poly() - other.as_poly())

    def __neg__(self) -> "Polynomial":
        return Polynomial(self.dim, tuple((-c, e) for c, e in self.terms))

    def __mul__(self, other: Union["Polynomial", Scalar]) -> "Polynomial":
        if isinstance(other, Polynomial):
            self._check(other)
            return Polynomial.from_poly(self.as_poly() * other.as_poly())
        return self.scale(other)

    __rmul__ = __mul__

    def scale(self, factor: Scalar) -> "Polynomial":
        factor = _exact(factor)
        if factor == 0:
            return Polynomial(self.dim)
        return Polynomial(self.dim, tuple((c * factor, e) for c, e in self.terms))

    def diff(self, axis: int) -> "Polynomial":
        return Polynomial.from_poly(self.as_poly().diff(_gens(self.dim)[axis]))

    @cached_property
    def _float_terms(self) -> tuple[tuple[float, tuple[int, ...]], ...]:
        return tuple((float(c), e) for c, e in self.terms)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if pts.shape[-1] != self.dim:
            raise DimensionError(f"expected points with {self.dim} coordinates, got shape {pts.shape}")
        out = np.zeros(pts.shape[:-1])
        for coeff, exps in self._float_terms:
            term = np.full(pts.shape[:-1], coeff)
            for axis, power in enumerate(exps):
                if power:
                    term = term * pts[..., axis] ** power
            out = out + term
        return out

    def to_string(self, variables: Optional[Sequence[str]] = None) -> str:
        names = variables or default_variables(self.dim)
        subs = dict(zip(_gens(self.dim), sp.symbols(list(names))))
        return str(self.as_poly().as_expr().subs(subs)).replace("**", "^")


def parse_polynomial(text: str, variables: Sequence[str]) -> Polynomial:
    """Parse a coefficient string such as ``"-0.5*y"`` or ``"x^2*z"``."""
    dim = len(variables)
    symbols = dict(zip(variables, _gens(dim)))
    expr = parse_expression(text, symbols)
    try:
        return Polynomial.from_expr(expr, dim)
    except sp.PolynomialError as exc:
        position = text.find("/")
        raise ParseError(text, max(position, 0), "not a polynomial") from exc


@dataclass(frozen=True)
class PolyVectorField:
    """Σ_j components[j] ∂_j with polynomial coefficients."""

    dim: int
    components: tuple[Polynomial, ...]

    def __post_init__(self) -> None:
        if len(self.components) != self.dim or any(c.dim != self.dim for c in self.components):
            raise DimensionError("every component must be a polynomial in dim variables")

    @classmethod
    def from_strings(cls, components: Sequence[str], variables: Sequence[str]) -> "PolyVectorField":
        if len(components) != len(variables):
            raise DimensionError(
                f"a field in dimension {len(variables)} needs {len(variables)} components, got {len(components)}"
            )
        return cls(len(variables), tuple(parse_polynomial(text, variables) for text in components))

    @classmethod
    def coordinate(cls, dim: int, axis: int) -> "PolyVectorField":
        return cls(dim, tuple(Polynomial.constant(dim, 1 if j == axis else 0) for j in range(dim)))

    @classmethod
    def zero(cls, dim: int) -> "PolyVectorField":
        return cls(dim, tuple(Polynomial(dim) for _ in range(dim)))

    @property
    def is_zero(self) -> bool:
        return all(c.is_zero for c in self.components)

    def _check(self, other: "PolyVectorField") -> None:
        if other.dim != self.dim:
            raise DimensionError(f"vector field dimensions differ: {self.dim} vs {other.dim}")

    def __add__(self, other: "PolyVectorField") -> "PolyVectorField":
        self._check(other)
        return PolyVectorField(self.dim, tuple(a + b for a, b in zip(self.components, other.components)))

    def __sub__(self, other: "PolyVectorField") -> "PolyVectorField":
        self._check(other)
        return PolyVectorField(self.dim, tuple(a - b for a, b in zip(self.components, other.components)))

    def __neg__(self) -> "PolyVectorField":
        return PolyVectorField(self.dim, tuple(-c for c in self.components))

    def scale(self, factor: Scalar) -> "PolyVectorField":
        return PolyVectorField(self.dim, tuple(c.scale(factor) for c in self.components))

    def apply(self, poly: Polynomial) -> Polynomial:
        """Directional derivative Σ_j V_j ∂_j p."""
        result = Polynomial(self.dim)
        for axis, coeff in enumerate(self.components):
            if not coeff.is_zero:
                result = result + coeff * poly.diff(axis)
        return result

    def divergence(self) -> Polynomial:
        result = Polynomial(self.dim)
        for axis, coeff in enumerate(self.components):
            result = result + coeff.diff(axis)
        return result

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return np.stack([c(pts) for c in self.components], axis=-1)

    def to_strings(self, variables: Optional[Sequence[str]] = None) -> list[str]:
        return [c.to_string(variables) for c in self.components]


def lie_bracket(V: PolyVectorField, W: PolyVectorField) -> PolyVectorField:
    """[V, W]_k = Σ_j (V_j ∂_j W_k − W_j ∂_j V_k), exactly."""
    if V.dim != W.dim:
        raise DimensionError(f"cannot bracket fields of dimensions {V.dim} and {W.dim}")
    return PolyVectorField(V.dim, tuple(V.apply(wk) - W.apply(vk) for vk, wk in zip(V.components, W.components)))


@dataclass(frozen=True)
class CommutatorEntry:
    field: PolyVectorField
    degree: int
    # right-nested bracket word in generator indices: (0, 1) is [X1, X2], (0, 0, 1) is [X1, [X1, X2]]
    word: tuple[int, ...]


@dataclass(frozen=True)
class CommutatorTable:
    generators: tuple[PolyVectorField, ...]
    entries: tuple[CommutatorEntry, ...]
    step: int
    variables: tuple[str, ...]

    @property
    def dim(self) -> int:
        return self.generators[0].dim

    @property
    def m(self) -> int:
        return len(self.generators)

    @property
    def p(self) -> int:
        return len(self.entries)

    @property
    def fields(self) -> tuple[PolyVectorField, ...]:
        return tuple(e.field for e in self.entries)

    @property
    def degrees(self) -> tuple[int, ...]:
        return tuple(e.degree for e in self.entries)

    def labels(self) -> list[str]:
        def render(word: tuple[int, ...]) -> str:
            if len(word) == 1:
                return f"X{word[0] + 1}"
            return f"[X{word[0] + 1},{render(word[1:])}]"

        return [render(e.word) for e in self.entries]


def enumerate_commutators(
    generators: Sequence[PolyVectorField],
    step: int,
    variables: Optional[Sequence[str]] = None,
) -> CommutatorTable:
    """Enumerate X^(1), …, X^(step) in lexicographic bracket order, dropping vanishing brackets."""
    if step < 1:
        raise HormlabError(f"step must be >= 1, got {step}")
    if not generators:
        raise HormlabError("at least one generator is required")
    dim = generators[0].dim
    if any(g.dim != dim for g in generators):
        raise DimensionError("all generators must share the same dimension")

    gens = tuple(generators)
    entries = [CommutatorEntry(g, 1, (i,)) for i, g in enumerate(gens)]
    previous = list(entries)

    for degree in range(2, step + 1):
        if degree == 2:
            candidates = [((i, j), lie_bracket(gens[i], gens[j]))
                          for i, j in itertools.combinations(range(len(gens)), 2)]
        else:
            candidates = [((g,) + parent.word, lie_bracket(gens[g], parent.field))
                          for g in range(len(gens)) for parent in previous]
        candidates.sort(key=lambda item: item[0])

        layer: list[CommutatorEntry] = []
        for word, field in candidates:
            if field.is_zero:
                continue
            layer.append(CommutatorEntry(field, degree, word))
        if not layer:
            break
        entries.extend(layer)
        previous = layer

    table = CommutatorTable(gens, tuple(entries), step, tuple(variables or default_variables(dim)))
    logger.debug("commutator table: %d entries, degrees %s", table.p, table.degrees)
    return table


@dataclass(frozen=True)
class EpsilonFamily:
    epsilon: float
    rescaled: tuple[PolyVectorField, ...]
    extended: tuple[PolyVectorField, ...]
    degrees_eps: tuple[int, ...]
    table: CommutatorTable

    @property
    def dim(self) -> int:
        return self.table.dim

    @property
    def size(self) -> int:
        return len(self.extended)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Extended fields at ``points``: array (..., size, dim)."""
        pts = np.asarray(points, dtype=float)
        return np.stack([f(pts) for f in self.extended], axis=-2)

    def frame(self, points: np.ndarray) -> np.ndarray:
        """Rescaled fields X^ε as matrix columns: array (..., dim, p)."""
        pts = np.asarray(points, dtype=float)
        return np.stack([f(pts) for f in self.rescaled], axis=-1)

    def horizontal(self, points: np.ndarray) -> np.ndarray:
        """Generators X_1..X_m as matrix columns: array (..., dim, m)."""
        pts = np.asarray(points, dtype=float)
        return np.stack([f(pts) for f in self.rescaled[: self.table.m]], axis=-1)

    @cached_property
    def active(self) -> tuple[int, ...]:
        """Indices of rescaled fields that do not vanish identically."""
        return tuple(i for i, f in enumerate(self.rescaled) if not f.is_zero)


def rescale(table: CommutatorTable, epsilon: float, epsilon_bar: float = DEFAULT_EPSILON_BAR) -> EpsilonFamily:
    """Build X^ε and the extended family Y^ε with the extended degree function d_ε."""
    if not 0.0 <= epsilon_bar <= 1.0:
        raise HormlabError(f"epsilon_bar must lie in [0, 1], got {epsilon_bar}")
    if not 0.0 <= epsilon <= epsilon_bar:
        raise HormlabError(f"epsilon must lie in [0, {epsilon_bar}], got {epsilon}")

    m, p = table.m, table.p
    eps = _exact(epsilon)
    rescaled = tuple(
        e.field if k < m else e.field.scale(eps ** (e.degree - 1))
        for k, e in enumerate(table.entries)
    )
    extended = rescaled + tuple(table.entries[k].field for k in range(m, p))
    degrees_eps = (1,) * p + tuple(table.entries[k].degree for k in range(m, p))
    return EpsilonFamily(float(epsilon), rescaled, extended, degrees_eps, table)


@dataclass(frozen=True)
class IndexTuple:
    indices: tuple[int, ...]
    degree_sum: int

    @classmethod
    def of(cls, family: EpsilonFamily, indices: Iterable[int]) -> "IndexTuple":
        indices = tuple(int(i) for i in indices)
        if len(indices) != family.dim:
            raise DimensionError(f"an index tuple needs {family.dim} entries, got {len(indices)}")
        if len(set(indices)) != len(indices):
            raise HormlabError(f"index tuple entries must be distinct: {indices}")
        if any(i < 0 or i >= family.size for i in indices):
            raise HormlabError(f"index tuple {indices} out of range for a family of size {family.size}")
        return cls(indices, sum(family.degrees_eps[i] for i in indices))

    def complement(self, family: EpsilonFamily) -> tuple[int, ...]:
        chosen = set(self.indices)
        return tuple(i for i in range(family.size) if i not in chosen)


def _as_tuple(family: EpsilonFamily, I: Union[IndexTuple, Sequence[int]]) -> IndexTuple:
    return I if isinstance(I, IndexTuple) else IndexTuple.of(family, I)


def lambda_det(family: EpsilonFamily, x: np.ndarray, I: Union[IndexTuple, Sequence[int]]) -> Union[float, np.ndarray]:
    """λ^ε_I(x) = det(Y^ε_{i_1}(x), …, Y^ε_{i_n}(x))."""
    I = _as_tuple(family, I)
    pts = np.asarray(x, dtype=float)
    columns = np.stack([family.extended[i](pts) for i in I.indices], axis=-1)
    det = np.linalg.det(columns)
    return float(det) if np.ndim(det) == 0 else det


def all_index_tuples(family: EpsilonFamily) -> list[IndexTuple]:
    return [IndexTuple.of(family, c) for c in itertools.combinations(range(family.size), family.dim)]


def index_weights(family: EpsilonFamily, x: np.ndarray, r: float) -> list[tuple[IndexTuple, float, float]]:
    """(I, λ_I(x), |λ_I(x)| r^{d_ε(I)}) for every increasing n-tuple, in lexicographic order."""
    values = family.evaluate(np.asarray(x, dtype=float))
    rows = []
    for I in all_index_tuples(family):
        lam = float(np.linalg.det(values[list(I.indices), :].T))
        rows.append((I, lam, abs(lam) * r ** I.degree_sum))
    return rows


def best_index(family: EpsilonFamily, x: np.ndarray, r: float, C2: float = DEFAULT_C2) -> IndexTuple:
    """The maximizer of |λ_I(x)| r^{d_ε(I)}; ties resolve to the lexicographically first tuple."""
    if not 0.0 < C2 < 1.0:
        raise HormlabError(f"C2 must lie in (0, 1), got {C2}")
    if r <= 0:
        raise HormlabError(f"r must be positive, got {r}")
    best, best_weight = None, 0.0
    for I, _, weight in index_weights(family, x, r):
        if weight > best_weight * (1.0 + 1e-12):
            best, best_weight = I, weight
    if best is None:
        raise HormanderFailure(f"every λ_I vanishes at x={np.asarray(x).tolist()}")
    return best


def volume_polynomial(family: EpsilonFamily, x: np.ndarray, r: float) -> float:
    """Λ_ε(x, r) = Σ_I |λ^ε_I(x)| r^{d_ε(I)} over increasing n-tuples."""
    if r <= 0:
        raise HormlabError(f"r must be positive, got {r}")
    return float(sum(weight for _, _, weight in index_weights(family, x, r)))


def hormander_rank(table: CommutatorTable, x: np.ndarray) -> int:
    pts = np.asarray(x, dtype=float)
    matrix = np.stack([f(pts) for f in table.fields], axis=-1)
    return int(np.linalg.matrix_rank(matrix))


def homogeneous_dimension(table: CommutatorTable, x: np.ndarray, tol: float = 1e-12) -> int:
    """Minimal degree sum over n-tuples of table entries spanning R^n at x."""
    pts = np.asarray(x, dtype=float)
    values = np.stack([f(pts) for f in table.fields], axis=0)
    best: Optional[int] = None
    for combo in itertools.combinations(range(table.p), table.dim):
        if abs(np.linalg.det(values[list(combo), :].T)) > tol:
            degree = sum(table.degrees[i] for i in combo)
            best = degree if best is None else min(best, degree)
    if best is None:
        raise HormanderFailure(f"the table does not span R^{table.dim} at x={pts.tolist()}")
    return best


def graded_weights(family: EpsilonFamily, x: np.ndarray, tol: float = 1e-12) -> tuple[int, ...]:
    """Per-axis weight: minimal d_ε of an extended field with a nonzero component along the axis at x."""
    values = family.evaluate(np.asarray(x, dtype=float))
    weights = []
    for axis in range(family.dim):
        active = [family.degrees_eps[i] for i in range(family.size) if abs(values[i, axis]) > tol]
        weights.append(min(active) if active else max(family.degrees_eps))
    return tuple(weights)


def graded_factor(degree: int) -> float:
    return 1.0 / factorial(degree)


# ── Reference frames ──────────────────────────────────────────────────────────

def heisenberg(step: int = 2) -> CommutatorTable:
    """First Heisenberg group with X1 = ∂x − y/2 ∂z, X2 = ∂y + x/2 ∂z."""
    variables = ("x", "y", "z")
    gens = [
        PolyVectorField.from_strings(["1", "0", "-0.5*y"], variables),
        PolyVectorField.from_strings(["0", "1", "0.5*x"], variables),
    ]
    return enumerate_commutators(gens, step, variables)


def grushin(step: int = 2) -> CommutatorTable:
    variables = ("x", "y")
    gens = [
        PolyVectorField.from_strings(["1", "0"], variables),
        PolyVectorField.from_strings(["0", "x"], variables),
    ]
    return enumerate_commutators(gens, step, variables)


def euclidean(dim: int, step: int = 1) -> CommutatorTable:
    gens = [PolyVectorField.coordinate(dim, axis) for axis in range(dim)]
    return enumerate_commutators(gens, step, default_variables(dim))


def named_frame(name: str) -> CommutatorTable:
    """``heisenberg``, ``grushin`` or ``euclidean<n>`` (``euclidean`` alone is R³)."""
    key = name.strip().lower()
    if key == "heisenberg":
        return heisenberg()
    if key == "grushin":
        return grushin()
    if key.startswith("euclidean"):
        rest = key[len("euclidean"):]
        if rest == "":
            return euclidean(3)
        if rest.isdigit() and int(rest) > 0:
            return euclidean(int(rest))
    raise HormlabError(f"unknown model frame {name!r}")


def frame_from_spec(spec: dict) -> CommutatorTable:
    """Build a table from the frame-file payload {dim, generators, step, variables?}."""
    try:
        dim = int(spec["dim"])
        generators = spec["generators"]
        step = int(spec.get("step", 2))
    except (KeyError, TypeError, ValueError) as exc:
        raise HormlabError(f"invalid frame definition: {exc}") from exc
    variables = tuple(spec.get("variables") or default_variables(dim))
    if len(variables) != dim:
        raise DimensionError(f"{len(variables)} variable names given for dimension {dim}")
    fields = [PolyVectorField.from_strings(components, variables) for components in generators]
    return enumerate_commutators(fields, step, variables)


def frame_spec(table: CommutatorTable) -> dict:
    """Inverse of ``frame_from_spec``: the frame-file payload rebuilding ``table``."""
    return {
        "dim": table.dim,
        "generators": [g.to_strings(table.variables) for g in table.generators],
        "step": table.step,
        "variables": list(table.variables),
    }


def load_frame(path: Union[str, Path]) -> CommutatorTable:
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as exc:
        raise HormlabError(f"cannot read frame file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise HormlabError(f"frame file {path} is not valid JSON: {exc}") from exc
    return frame_from_spec(payload)


def run_frame_report(
    table: CommutatorTable,
    x: Sequence[float],
    epsilon: float = 0.0,
    r: float = 0.1,
    C2: float = DEFAULT_C2,
) -> dict:
    """Inspection payload: commutator table, degrees, λ_I values, rank and best index at x."""
    point = np.asarray(x, dtype=float)
    if point.shape != (table.dim,):
        raise DimensionError(f"point must have {table.dim} coordinates")
    family = rescale(table, epsilon)
    weights = index_weights(family, point, r)

    try:
        best = best_index(family, point, r, C2)
        best_payload = {"indices": list(best.indices), "degree_sum": best.degree_sum}
    except HormanderFailure as exc:
        best_payload = {"error": str(exc)}

    try:
        hom_dim = homogeneous_dimension(table, point)
    except HormanderFailure:
        hom_dim = None

    return {
        "type": "frame",
        "dim": table.dim,
        "m": table.m,
        "p": table.p,
        "step": table.step,
        "variables": list(table.variables),
        "entries": [
            {"label": label, "degree": e.degree, "components": e.field.to_strings(table.variables)}
            for label, e in zip(table.labels(), table.entries)
        ],
        "degrees": list(table.degrees),
        "point": point.tolist(),
        "epsilon": float(epsilon),
        "r": float(r),
        "degrees_eps": list(family.degrees_eps),
        "hormander_rank": hormander_rank(table, point),
        "spans": hormander_rank(table, point) == table.dim,
        "homogeneous_dimension": hom_dim,
        "lambdas": [
            {"indices": list(I.indices), "degree_sum": I.degree_sum, "lambda": lam, "weight": w}
            for I, lam, w in weights
        ],
        "volume_polynomial": float(sum(w for _, _, w in weights)),
        "best_index": best_payload,
    }
