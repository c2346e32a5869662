"""Finite-difference horizontal operators and time stepping for ∂_t u = −Σ X_i^* A_i + B."""
from __future__ import annotations

import dataclasses
import itertools
import logging
import time
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Literal, Optional, Sequence

import numpy as np
import sympy as sp
from scipy import sparse
from scipy.sparse import linalg as spla
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from ..errors import CFLViolation, ConvergenceError, DimensionError, HormlabError, StructureError, SupportError
from ..grammar import DATA_FUNCTIONS, default_variables, parse_expression
from .frames import CommutatorTable, EpsilonFamily, rescale
from .functional import StructureParams, validate_structure
from .lattice import Box, GridFunction, Lattice, SpaceTimeGridFunction
from .metric import integrate_flow

logger = logging.getLogger(__name__)

Mode = Literal["explicit", "implicit"]
Stencil = Literal["nested", "directional"]

DEFAULT_CFL_SAFETY = 0.9
DEFAULT_LINEAR_TOL = 1e-10
DEFAULT_MAX_ITERS = 500


# ── Data expressions ──────────────────────────────────────────────────────────

@dataclass(frozen=True)
class DataExpression:
    """A parsed initial/boundary/coefficient expression in the space variables and ``t``."""

    text: str
    variables: tuple[str, ...]
    expr: sp.Expr

    @property
    def depends_on_time(self) -> bool:
        return sp.Symbol("t") in self.expr.free_symbols

    @property
    def is_zero(self) -> bool:
        return self.expr == 0

    @cached_property
    def _fn(self) -> Callable:
        return sp.lambdify([*sp.symbols(list(self.variables)), sp.Symbol("t")], self.expr, modules="numpy")

    def __call__(self, points: np.ndarray, t: float = 0.0) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        fn = self._fn
        args = [pts[..., j] for j in range(len(self.variables))]
        with np.errstate(all="ignore"):
            out = np.broadcast_to(np.asarray(fn(*args, float(t)), dtype=float), pts.shape[:-1])
        if not np.all(np.isfinite(out)):
            raise HormlabError(f"expression {self.text!r} is not finite on the lattice at t={t}")
        return np.array(out)


def data_expression(text: str, dim: int, variables: Optional[Sequence[str]] = None) -> DataExpression:
    """Parse ``text`` in the coefficient grammar extended with ``t`` and exp, sin, cos, sqrt, log."""
    names = tuple(variables or default_variables(dim))
    if len(names) != dim:
        raise DimensionError(f"{len(names)} variable names given for dimension {dim}")
    symbols = {name: sp.Symbol(name) for name in (*names, "t")}
    expr = parse_expression(str(text), symbols, tuple(DATA_FUNCTIONS))
    return DataExpression(str(text), names, expr)


# ── Problem and scheme ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class FluxSpec:
    """A_i = Σ_j α_ij(x, t) X_j u (``identity`` / ``matrix``) or (1 + amplitude·sin u) X_i u (``model``)."""

    kind: Literal["identity", "matrix", "model"] = "identity"
    matrix: Optional[tuple[tuple[str, ...], ...]] = None
    amplitude: float = 0.5

    def __post_init__(self) -> None:
        if self.kind == "matrix" and not self.matrix:
            raise HormlabError("a matrix flux needs its coefficient matrix")
        if self.kind == "model" and not 0 <= self.amplitude < 1:
            raise HormlabError(f"model amplitude must lie in [0, 1), got {self.amplitude}")
        if self.matrix is not None:
            rows = tuple(tuple(str(c) for c in row) for row in self.matrix)
            if any(len(row) != len(rows) for row in rows):
                raise DimensionError("flux matrix must be square")
            object.__setattr__(self, "matrix", rows)

    @property
    def is_linear(self) -> bool:
        return self.kind != "model"


@dataclass(frozen=True)
class SourceSpec:
    """B = c·|Xu| + d·u + g with expression coefficients."""

    c: str = "0"
    d: str = "0"
    g: str = "0"

    @property
    def is_zero(self) -> bool:
        return all(str(v).strip() in ("0", "0.0") for v in (self.c, self.d, self.g))


@dataclass(frozen=True, eq=False)
class ParabolicProblem:
    family: EpsilonFamily
    lattice: Lattice
    T: float
    initial: GridFunction
    boundary: Callable[[np.ndarray, float], np.ndarray]
    flux: FluxSpec = FluxSpec()
    source: SourceSpec = SourceSpec()
    structure: StructureParams = StructureParams()
    step: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.T > 0:
            raise HormlabError(f"T must be positive, got {self.T}")
        if self.lattice.dim != self.family.dim:
            raise DimensionError("lattice and frame dimensions differ")
        if not self.initial.lattice.same_as(self.lattice):
            raise DimensionError("initial data does not match the problem lattice")
        validate_structure(self.structure, strict=True)
        if self.flux.matrix is not None and len(self.flux.matrix) > len(self.family.active):
            raise DimensionError(
                f"flux matrix of size {len(self.flux.matrix)} exceeds the {len(self.family.active)} active fields"
            )

    @property
    def window(self) -> tuple[float, float]:
        return self.structure.a, self.structure.abar


@dataclass(frozen=True)
class SchemeConfig:
    mode: Mode = "implicit"
    tau: Optional[float] = None
    cfl_safety: float = DEFAULT_CFL_SAFETY
    linear_solver_tol: float = DEFAULT_LINEAR_TOL
    max_iters: int = DEFAULT_MAX_ITERS
    stencil: Stencil = "nested"
    keep_every: int = 1

    def __post_init__(self) -> None:
        if self.mode not in ("explicit", "implicit"):
            raise HormlabError(f"unknown mode {self.mode!r}")
        if self.stencil not in ("nested", "directional"):
            raise HormlabError(f"unknown stencil {self.stencil!r}")
        if not 0 < self.cfl_safety <= 1:
            raise HormlabError(f"cfl_safety must lie in (0, 1], got {self.cfl_safety}")
        if self.tau is not None and not self.tau > 0:
            raise HormlabError(f"tau must be positive, got {self.tau}")
        if self.linear_solver_tol <= 0 or self.max_iters < 1 or self.keep_every < 1:
            raise HormlabError("linear_solver_tol, max_iters and keep_every must be positive")


@dataclass
class SolveStats:
    mode: str
    stencil: str
    tau: float
    steps: int
    cfl_limit: Optional[float] = None
    monotone: Optional[bool] = None
    linear_iterations: int = 0
    picard_iterations: int = 0
    max_picard_iterations: int = 0
    wall_time: float = 0.0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


# ── Sparse operators ──────────────────────────────────────────────────────────

def _difference_1d(n: int, h: float, periodic: bool) -> sparse.csr_matrix:
    if periodic:
        if n < 3:
            raise HormlabError("a periodic axis needs at least three nodes")
        D = sparse.diags([-np.ones(n - 1), np.ones(n - 1)], [-1, 1], shape=(n, n), format="lil")
        D[0, n - 1] = -1.0
        D[n - 1, 0] = 1.0
        return (D.tocsr() / (2.0 * h)).tocsr()
    D = sparse.diags([-np.ones(n - 1), np.ones(n - 1)], [-1, 1], shape=(n, n), format="lil")
    if n >= 3:
        D[0, :3] = [-3.0, 4.0, -1.0]
        D[n - 1, n - 3:] = [1.0, -4.0, 3.0]
    else:
        D[0, :2] = [-2.0, 2.0]
        D[n - 1, n - 2:] = [-2.0, 2.0]
    return (D.tocsr() / (2.0 * h)).tocsr()


def partial_operators(lattice: Lattice) -> list[sparse.csr_matrix]:
    """∂_j as sparse matrices on the C-ordered node vector, matching ``lattice.partial``."""
    eyes = [sparse.identity(n, format="csr") for n in lattice.shape]
    out = []
    for axis in range(lattice.dim):
        factors = list(eyes)
        factors[axis] = _difference_1d(lattice.shape[axis], lattice.spacing[axis], lattice.periodic)
        op = factors[0]
        for f in factors[1:]:
            op = sparse.kron(op, f, format="csr")
        out.append(op.tocsr())
    return out


def horizontal_operators(family: EpsilonFamily, lattice: Lattice) -> list[sparse.csr_matrix]:
    """X^ε_i = Σ_j diag(a_ij) ∂_j for every non-vanishing rescaled field."""
    if lattice.dim != family.dim:
        raise DimensionError("lattice and frame dimensions differ")
    partials = partial_operators(lattice)
    pts = lattice.points()
    ops = []
    for i in family.active:
        coeffs = family.rescaled[i](pts)
        op = sparse.csr_matrix((lattice.size, lattice.size))
        for axis in range(lattice.dim):
            if np.any(coeffs[:, axis] != 0):
                op = op + sparse.diags(coeffs[:, axis]) @ partials[axis]
        ops.append(op.tocsr())
    return ops


def field_divergences(family: EpsilonFamily, lattice: Lattice) -> list[np.ndarray]:
    pts = lattice.points()
    return [np.broadcast_to(family.rescaled[i].divergence()(pts), (lattice.size,)).astype(float)
            for i in family.active]


def interpolation_matrix(lattice: Lattice, points: np.ndarray) -> sparse.csr_matrix:
    """Multilinear interpolation weights, points clipped into the lattice box: (len(points), size)."""
    pts = np.asarray(points, dtype=float)
    shape = np.asarray(lattice.shape)
    rel = np.clip((pts - np.asarray(lattice.lower)) / np.asarray(lattice.spacing), 0, shape - 1)
    base = np.minimum(np.floor(rel).astype(np.int64), shape - 2)
    frac = rel - base
    rows, cols, vals = [], [], []
    row_ids = np.arange(pts.shape[0])
    for corner in itertools.product((0, 1), repeat=lattice.dim):
        c = np.asarray(corner)
        weight = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
        rows.append(row_ids)
        cols.append(lattice.flat_index(base + c))
        vals.append(weight)
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(pts.shape[0], lattice.size),
    )


def directional_second_differences(family: EpsilonFamily, lattice: Lattice, step: float) -> list[sparse.csr_matrix]:
    """(u∘φ_s − 2u + u∘φ_{−s}) / s² along the flow φ of each active rescaled field."""
    if step <= 0:
        raise HormlabError(f"directional step must be positive, got {step}")
    if lattice.periodic:
        raise HormlabError("directional differences need a non-periodic lattice")
    pts = lattice.points()
    eye = sparse.identity(lattice.size, format="csr")
    ops = []
    for i in family.active:
        coeffs = np.zeros((pts.shape[0], family.size))
        coeffs[:, i] = step
        forward = integrate_flow(family, pts, coeffs)
        backward = integrate_flow(family, pts, -coeffs)
        ops.append(((interpolation_matrix(lattice, forward) - 2 * eye + interpolation_matrix(lattice, backward))
                    / step ** 2).tocsr())
    return ops


class _Discretization:
    """Operators and coefficient samplers for one problem on one lattice."""

    def __init__(self, problem: ParabolicProblem, stencil: Stencil) -> None:
        self.problem = problem
        self.stencil = stencil
        lattice = problem.lattice
        self.points = lattice.points()
        self.ops = horizontal_operators(problem.family, lattice)
        self.div = field_divergences(problem.family, lattice)
        self.boundary = lattice.boundary_mask().ravel()
        self.interior = ~self.boundary
        k = len(self.ops)

        self.alpha: Optional[list[list[DataExpression]]] = None
        if problem.flux.kind == "matrix":
            given = problem.flux.matrix
            names = problem.family.table.variables
            self.alpha = [
                [data_expression(given[i][j], lattice.dim, names) if i < len(given) and j < len(given)
                 else data_expression("1" if i == j else "0", lattice.dim, names)
                 for j in range(k)]
                for i in range(k)
            ]
        names = problem.family.table.variables
        self.source = {key: data_expression(getattr(problem.source, key), lattice.dim, names) for key in "cdg"}

        if stencil == "directional":
            if problem.flux.kind == "matrix":
                raise HormlabError("the directional stencil supports identity and model fluxes only")
            if problem.step is None:
                raise HormlabError("the directional stencil needs the problem's base step")
            self.second = directional_second_differences(problem.family, lattice, problem.step)
        self._cache: Optional[sparse.csr_matrix] = None

    @property
    def time_dependent(self) -> bool:
        if self.alpha is None:
            return False
        return any(e.depends_on_time for row in self.alpha for e in row)

    def alpha_values(self, t: float) -> np.ndarray:
        """α_ij at every node: array (size, k, k)."""
        k = len(self.ops)
        if self.alpha is None:
            return np.broadcast_to(np.eye(k), (self.points.shape[0], k, k))
        return np.stack([np.stack([e(self.points, t) for e in row], axis=-1) for row in self.alpha], axis=-2)

    def check_window(self, t: float, u: Optional[np.ndarray]) -> None:
        a, abar = self.problem.window
        slack = 1e-12 * max(1.0, abar)
        if self.problem.flux.kind == "model":
            amp = self.problem.flux.amplitude
            coeff = 1.0 + amp * np.sin(u) if u is not None else np.array([1.0 - amp, 1.0 + amp])
            low, high = float(coeff.min()), float(coeff.max())
        else:
            alpha = self.alpha_values(t)
            eig = np.linalg.eigvalsh(0.5 * (alpha + np.swapaxes(alpha, -1, -2)))
            low, high = float(eig.min()), float(eig.max())
        if low < a - slack or high > abar + slack:
            raise StructureError([f"flux leaves the ellipticity window [{a}, {abar}]: range [{low:.6g}, {high:.6g}] at t={t}"])

    def coefficient(self, u: np.ndarray) -> Optional[np.ndarray]:
        if self.problem.flux.kind == "model":
            return 1.0 + self.problem.flux.amplitude * np.sin(u)
        return None

    def operator(self, t: float, u: Optional[np.ndarray] = None) -> sparse.csr_matrix:
        """Matrix of u ↦ Σ_i (X_i + div X_i)(A_i) with coefficients frozen at (t, u)."""
        linear = self.problem.flux.is_linear
        if linear and self._cache is not None and not self.time_dependent:
            return self._cache
        self.check_window(t, u)
        coeff = self.coefficient(u) if not linear else None
        size = self.points.shape[0]

        if self.stencil == "directional":
            scale = sparse.diags(coeff) if coeff is not None else sparse.identity(size, format="csr")
            L = sparse.csr_matrix((size, size))
            for second, X, div in zip(self.second, self.ops, self.div):
                L = L + scale @ second
                if np.any(div != 0):
                    L = L + sparse.diags(div) @ scale @ X
        else:
            alpha = self.alpha_values(t)
            L = sparse.csr_matrix((size, size))
            for i, (Xi, div) in enumerate(zip(self.ops, self.div)):
                outer = Xi + sparse.diags(div) if np.any(div != 0) else Xi
                inner = sparse.csr_matrix((size, size))
                for j, Xj in enumerate(self.ops):
                    weights = alpha[:, i, j] if coeff is None else (coeff if i == j else np.zeros(size))
                    if np.any(weights != 0):
                        inner = inner + sparse.diags(weights) @ Xj
                L = L + outer @ inner
        L = L.tocsr()
        if linear and not self.time_dependent:
            self._cache = L
        return L

    def fluxes(self, u: np.ndarray, t: float) -> list[np.ndarray]:
        grads = [X @ u for X in self.ops]
        coeff = self.coefficient(u)
        if coeff is not None:
            return [coeff * g for g in grads]
        alpha = self.alpha_values(t)
        return [sum(alpha[:, i, j] * grads[j] for j in range(len(grads))) for i in range(len(grads))]

    def source_values(self, u: np.ndarray, t: float) -> np.ndarray:
        if self.problem.source.is_zero:
            return np.zeros_like(u)
        grad_norm = np.sqrt(sum((X @ u) ** 2 for X in self.ops))
        s = self.source
        return s["c"](self.points, t) * grad_norm + s["d"](self.points, t) * u + s["g"](self.points, t)

    def boundary_values(self, t: float) -> np.ndarray:
        return self.problem.boundary(self.points[self.boundary], t)


def heat_operator(
    family: EpsilonFamily,
    lattice: Lattice,
    stencil: Stencil = "nested",
    step: Optional[float] = None,
) -> sparse.csr_matrix:
    """Σ_i (X_i + div X_i) X_i: the linear ε-heat operator, periodic lattices included for the nested stencil."""
    if stencil == "directional":
        ops = directional_second_differences(family, lattice, step if step is not None else min(lattice.spacing))
        X = horizontal_operators(family, lattice)
        L = sum(ops, sparse.csr_matrix((lattice.size, lattice.size)))
        for Xi, div in zip(X, field_divergences(family, lattice)):
            if np.any(div != 0):
                L = L + sparse.diags(div) @ Xi
        return L.tocsr()
    L = sparse.csr_matrix((lattice.size, lattice.size))
    for Xi, div in zip(horizontal_operators(family, lattice), field_divergences(family, lattice)):
        outer = Xi + sparse.diags(div) if np.any(div != 0) else Xi
        L = L + outer @ Xi
    return L.tocsr()


def discretize_divergence_form(
    family: EpsilonFamily,
    flux: FluxSpec,
    u: GridFunction,
    t: float = 0.0,
    window: tuple[float, float] = (0.0, np.inf),
) -> GridFunction:
    """−Σ_i X_i^*(A_i(·, t, u, Xu)) at every node with X_i^* = −X_i − div X_i (nested differences)."""
    problem = ParabolicProblem(
        family=family,
        lattice=u.lattice,
        T=1.0,
        initial=u,
        boundary=lambda pts, _t: np.zeros(pts.shape[:-1]),
        flux=flux,
        structure=StructureParams(a=max(window[0], 1e-300), abar=window[1] if np.isfinite(window[1]) else 1e300),
    )
    disc = _Discretization(problem, "nested")
    values = u.values.ravel()
    disc.check_window(t, values)
    fluxes = disc.fluxes(values, t)
    out = sum(X @ A + div * A for X, div, A in zip(disc.ops, disc.div, fluxes))
    return u.with_values(np.asarray(out).reshape(u.lattice.shape))


def _stability_limit(L: sparse.csr_matrix, interior: np.ndarray) -> float:
    rows = abs(L[np.flatnonzero(interior)]).sum(axis=1)
    bound = float(np.max(rows)) if rows.size else 0.0
    return np.inf if bound <= 0 else 2.0 / bound


def cfl_limit(problem: ParabolicProblem, stencil: Stencil = "nested") -> float:
    """2 / max over interior rows of Σ_c |L_rc|, taken over the time samples 0, T/2, T.

    Nonlinear model fluxes use the largest admissible coefficient.
    """
    disc = _Discretization(problem, stencil)
    size = disc.points.shape[0]
    if problem.flux.kind == "model":
        peak = np.full(size, np.pi / 2)
        return _stability_limit(disc.operator(0.0, peak), disc.interior)
    times = (0.0, problem.T / 2, problem.T) if disc.time_dependent else (0.0,)
    return min(_stability_limit(disc.operator(t), disc.interior) for t in times)


def is_monotone(problem: ParabolicProblem, stencil: Stencil = "nested") -> bool:
    """True when every interior row of the operator has nonnegative off-diagonal weights."""
    disc = _Discretization(problem, stencil)
    L = disc.operator(0.0, np.zeros(disc.points.shape[0])).tocoo()
    off = (L.row != L.col) & disc.interior[L.row]
    return bool(np.all(L.data[off] >= -1e-12 * np.abs(L.data).max()))


# ── Time stepping ─────────────────────────────────────────────────────────────

def _linear_solve(A: sparse.csr_matrix, b: np.ndarray, x0: np.ndarray, tol: float, max_iters: int) -> tuple[np.ndarray, int]:
    count = [0]

    def tick(_):
        count[0] += 1

    if b.size == 0:
        return b, 0
    asym = abs(A - A.T).max() if A.nnz else 0.0
    if asym <= 1e-12 * abs(A).max():
        x, info = spla.cg(A, b, x0=x0, rtol=tol, atol=0.0, maxiter=max_iters, callback=tick)
    else:
        try:
            ilu = spla.spilu(A.tocsc(), drop_tol=1e-6, fill_factor=20)
            M = spla.LinearOperator(A.shape, ilu.solve)
        except RuntimeError:
            M = None
        x, info = spla.gmres(A, b, x0=x0, rtol=tol, atol=0.0, restart=50, maxiter=max_iters, M=M,
                             callback=tick, callback_type="pr_norm")
    if info != 0:
        residual = float(np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), np.finfo(float).tiny))
        raise ConvergenceError("linear solver did not converge", count[0], residual)
    return x, count[0]


def _time_grid(problem: ParabolicProblem, scheme: SchemeConfig, limit: Optional[float]) -> tuple[float, int]:
    if scheme.tau is not None:
        tau = scheme.tau
        if scheme.mode == "explicit" and tau > scheme.cfl_safety * limit:
            raise CFLViolation(tau, scheme.cfl_safety * limit)
        steps = int(round(problem.T / tau))
        if steps < 1 or abs(steps * tau - problem.T) > 1e-9 * problem.T:
            raise HormlabError(f"T={problem.T} is not a whole number of steps of tau={tau}")
        return tau, steps
    if scheme.mode == "explicit":
        target = scheme.cfl_safety * limit
    else:
        target = 4.0 * min(problem.lattice.spacing) ** 2 if limit is None else 4.0 * limit
    steps = max(int(np.ceil(problem.T / target - 1e-12)), 1)
    return problem.T / steps, steps


def solve(problem: ParabolicProblem, scheme: SchemeConfig = SchemeConfig(), return_stats: bool = False):
    """March from the initial slice to T with Dirichlet data on ∂Ω × (0, T].

    Explicit mode is forward Euler behind a CFL check. Implicit mode is
    backward Euler; nonlinear fluxes and sources use lagged-coefficient
    Picard iteration. A periodic lattice has no boundary nodes, so the
    Dirichlet data is never sampled there.
    """
    started = time.perf_counter()
    disc = _Discretization(problem, scheme.stencil)
    lattice = problem.lattice
    limit = cfl_limit(problem, scheme.stencil) if scheme.mode == "explicit" or scheme.tau is None else None
    tau, steps = _time_grid(problem, scheme, limit)
    if steps % scheme.keep_every:
        raise HormlabError(f"keep_every={scheme.keep_every} does not divide the {steps} time steps")
    if scheme.mode == "explicit" and tau > 0.95 * limit:
        logger.warning("explicit tau=%.3e is within 5%% of the stability limit %.3e", tau, limit)
    stats = SolveStats(scheme.mode, scheme.stencil, tau, steps, cfl_limit=limit,
                       monotone=is_monotone(problem, scheme.stencil))
    if not stats.monotone:
        logger.warning("the %s stencil is not monotone on this lattice; the discrete maximum principle may fail",
                       scheme.stencil)
    logger.info("solve: %s/%s, tau=%.3e, %d steps on %s nodes", scheme.mode, scheme.stencil, tau, steps, lattice.shape)

    u = problem.initial.values.ravel().copy()
    slices = [u.reshape(lattice.shape).copy()]
    bnd = np.flatnonzero(disc.boundary)
    inner = np.flatnonzero(disc.interior)
    iterate = not (problem.flux.is_linear and problem.source.is_zero)
    eye = sparse.identity(u.size, format="csr")
    blocks: Optional[tuple[sparse.csr_matrix, sparse.csr_matrix]] = None

    def split(L: sparse.csr_matrix) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
        rows = (eye - tau * L).tocsr()[inner]
        return rows[:, inner].tocsr(), rows[:, bnd].tocsr()

    with logging_redirect_tqdm():
        for n in tqdm(range(steps), desc="time steps", disable=None, leave=False):
            t_now, t_next = n * tau, (n + 1) * tau
            g = disc.boundary_values(t_next)
            if scheme.mode == "explicit":
                rhs = disc.operator(t_now, u) @ u + disc.source_values(u, t_now)
                new = u + tau * rhs
                new[bnd] = g
            else:
                new = u.copy()
                new[bnd] = g
                change = 0.0
                for k in range(1, scheme.max_iters + 1):
                    if blocks is None or not problem.flux.is_linear or disc.time_dependent:
                        blocks = split(disc.operator(t_next, new))
                    A_II, A_IB = blocks
                    b = u[inner] + tau * disc.source_values(new, t_next)[inner] - A_IB @ g
                    solved, its = _linear_solve(A_II, b, new[inner], scheme.linear_solver_tol, scheme.max_iters)
                    stats.linear_iterations += its
                    change = float(np.max(np.abs(solved - new[inner]))) if solved.size else 0.0
                    new[inner] = solved
                    if not iterate or change <= scheme.linear_solver_tol * max(1.0, float(np.max(np.abs(new)))):
                        break
                else:
                    raise ConvergenceError("Picard iteration did not converge", scheme.max_iters, change)
                stats.picard_iterations += k
                stats.max_picard_iterations = max(stats.max_picard_iterations, k)
                logger.debug("step %d: %d Picard iterations", n + 1, k)
            if not np.all(np.isfinite(new)):
                raise ConvergenceError("solution became non-finite", n + 1)
            u = new
            if (n + 1) % scheme.keep_every == 0:
                slices.append(u.reshape(lattice.shape).copy())

    stats.wall_time = time.perf_counter() - started
    solution = SpaceTimeGridFunction(lattice, np.stack(slices), tau * scheme.keep_every, 0.0)
    return (solution, stats) if return_stats else solution


def weak_residual(u: SpaceTimeGridFunction, problem: ParabolicProblem, phi: SpaceTimeGridFunction) -> float:
    """Σ_n τ Σ_x [−u^n (φ^{n+1} − φ^n)/τ + X_i φ^{n+1} A_i(u^{n+1}) − φ^{n+1} B(u^{n+1})] |cell|."""
    if not (u.lattice.same_as(problem.lattice) and phi.lattice.same_as(problem.lattice)):
        raise DimensionError("u, phi and the problem must share one lattice")
    if u.n_slices != phi.n_slices or not np.isclose(u.tau, phi.tau):
        raise DimensionError("u and phi must share one time grid")
    scale = max(float(np.abs(phi.values).max()), 1.0)
    touching = (
        np.abs(phi.values[0]).max() > 1e-14 * scale
        or np.abs(phi.values[-1]).max() > 1e-14 * scale
        or np.abs(phi.values[:, problem.lattice.boundary_mask()]).max() > 1e-14 * scale
    )
    if touching:
        raise SupportError("phi must vanish at t=0, at t=T and on the spatial boundary")

    disc = _Discretization(problem, "nested")
    cell = problem.lattice.cell_volume
    total = 0.0
    for n in range(u.n_slices - 1):
        t_next = u.t0 + (n + 1) * u.tau
        un = u.values[n].ravel()
        un1 = u.values[n + 1].ravel()
        ph0 = phi.values[n].ravel()
        ph1 = phi.values[n + 1].ravel()
        term = -un * (ph1 - ph0)
        fluxes = disc.fluxes(un1, t_next)
        term = term + u.tau * sum((X @ ph1) * A for X, A in zip(disc.ops, fluxes))
        term = term - u.tau * ph1 * disc.source_values(un1, t_next)
        total += float(term.sum()) * cell
    return total


# ── Problem assembly and entry point ──────────────────────────────────────────

def problem_from_spec(table: CommutatorTable, spec) -> ParabolicProblem:
    """Build a problem from a ``ProblemSpec`` configuration model."""
    family = rescale(table, spec.epsilon)
    box = Box(spec.box.lower, spec.box.upper)
    lattice = Lattice.spanning(box, spec.grid)
    names = table.variables
    initial = GridFunction(lattice, data_expression(spec.initial, lattice.dim, names)(lattice.mesh(), 0.0))
    boundary = data_expression(spec.boundary or spec.initial, lattice.dim, names)
    flux = FluxSpec(kind=spec.flux.kind, matrix=spec.flux.matrix, amplitude=spec.flux.amplitude)
    source = SourceSpec(c=spec.source.c, d=spec.source.d, g=spec.source.g)
    structure = StructureParams(**spec.structure.model_dump()) if spec.structure else StructureParams()
    return ParabolicProblem(family, lattice, spec.T, initial, boundary, flux, source, structure,
                            step=float(min(lattice.spacing)))


def scheme_from_spec(spec) -> SchemeConfig:
    return SchemeConfig(
        mode=spec.mode,
        tau=None if spec.tau == "auto" else float(spec.tau),
        cfl_safety=spec.cfl_safety,
        linear_solver_tol=spec.linear_solver_tol,
        max_iters=spec.max_iters,
        stencil=spec.stencil,
        keep_every=spec.keep_every,
    )


def run_solve(table: CommutatorTable, spec, exact: Optional[str] = None) -> tuple[SpaceTimeGridFunction, dict]:
    problem = problem_from_spec(table, spec)
    scheme = scheme_from_spec(spec.scheme)
    solution, stats = solve(problem, scheme, return_stats=True)
    report = {
        "type": "solve",
        "epsilon": problem.family.epsilon,
        "shape": list(problem.lattice.shape),
        "T": problem.T,
        **stats.as_dict(),
        "final_min": float(solution.values[-1].min()),
        "final_max": float(solution.values[-1].max()),
    }
    exact = exact or getattr(spec, "exact", None)
    if exact:
        truth = data_expression(exact, problem.lattice.dim, table.variables)(problem.lattice.mesh(), solution.T)
        error = float(np.max(np.abs(solution.values[-1] - truth)))
        report["exact"] = exact
        report["final_error"] = error
        threshold = getattr(spec, "error_threshold", None)
        if threshold is not None:
            report["error_threshold"] = threshold
            report["pass"] = error <= threshold
    return solution, report
