"""Mixed norms, Steklov averages, structure exponents, cutoffs and Poincaré / Sobolev ratio estimators."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid

from ..errors import DegenerateRatioError, DimensionError, DomainError, HormlabError, StructureError, SupportError
from .frames import CommutatorTable, EpsilonFamily, rescale
from .lattice import GridFunction, Lattice, SpaceTimeGridFunction, apply_field
from .metric import DEFAULT_MOVE_BUDGET, DEFAULT_RESOLUTION, DistanceField, distance_field, fit_ball_lattice

logger = logging.getLogger(__name__)

INF = math.inf


# ── Mixed norms and time averages ─────────────────────────────────────────────

def _spatial_norm(values: np.ndarray, lattice: Lattice, p: float) -> np.ndarray:
    """Per-slice L^p norm of an array (nt, *shape); p = inf is the lattice max."""
    if math.isinf(p):
        return np.abs(values.reshape(values.shape[0], -1)).max(axis=1)
    return lattice.integrate(np.abs(values) ** p) ** (1.0 / p)


def lpq_norm(u: SpaceTimeGridFunction, p: float, q: float) -> float:
    """(∫ (∫ |u|^p dx)^{q/p} dt)^{1/q}: lattice quadrature in space, trapezoidal rule over the slices in time."""
    if p < 1 or q < 1:
        raise HormlabError(f"exponents must be >= 1, got p={p}, q={q}")
    inner = _spatial_norm(u.values, u.lattice, p)
    if math.isinf(q):
        return float(inner.max())
    return float(trapezoid(inner ** q, u.times) ** (1.0 / q))


def steklov(u: SpaceTimeGridFunction, h: float) -> SpaceTimeGridFunction:
    """Forward average u_h(t) = (1/h) ∫_0^h u(t + s) ds by the in-grid trapezoidal rule."""
    m = h / u.tau
    steps = int(round(m))
    if steps < 1 or abs(m - steps) > 1e-9 * max(1.0, m):
        raise HormlabError(f"h={h} is not a positive multiple of tau={u.tau}")
    if steps >= u.n_slices - 1:
        raise HormlabError(f"h={h} leaves fewer than two averaged slices")
    kept = u.n_slices - steps
    acc = 0.5 * (u.values[:kept] + u.values[steps:steps + kept])
    for shift in range(1, steps):
        acc = acc + u.values[shift:shift + kept]
    return SpaceTimeGridFunction(u.lattice, acc / steps, u.tau, u.t0)


# ── Structure conditions ──────────────────────────────────────────────────────

def _inv(value: float) -> float:
    return 0.0 if math.isinf(value) else 1.0 / value


def compute_theta(p: float, q: float, alpha: float, beta: float, N: float) -> float:
    """Largest θ with N/2p + 1/q ≤ (1−θ)/2, 2/p ≤ 1−θ, 1/α ≤ 1−θ and N/2α + 1/β ≤ 1−θ."""
    if N <= 2:
        raise HormlabError(f"N must exceed 2, got {N}")
    if min(p, q, alpha, beta) < 1:
        raise HormlabError("structure exponents must be >= 1")
    theta = min(
        1.0 - 2.0 * _inv(p),
        1.0 - 2.0 * (N / 2.0 * _inv(p) + _inv(q)),
        1.0 - _inv(alpha),
        1.0 - (N / 2.0 * _inv(alpha) + _inv(beta)),
    )
    if theta <= 0:
        raise StructureError([f"exponents (p={p}, q={q}, alpha={alpha}, beta={beta}, N={N}) leave theta={theta:.6g} <= 0"])
    return float(theta)


@dataclass(frozen=True)
class StructureParams:
    a: float = 1.0
    abar: float = 1.0
    norm_b: float = 0.0
    norm_c: float = 0.0
    norm_d: float = 0.0
    norm_e: float = 0.0
    norm_f: float = 0.0
    norm_g: float = 0.0
    norm_h: float = 0.0
    p: float = INF
    q: float = INF
    alpha: float = INF
    beta: float = INF
    N: float = 4.0
    theta: Optional[float] = None

    def as_dict(self) -> dict:
        return {k: (None if v is None else ("inf" if isinstance(v, float) and math.isinf(v) else v))
                for k, v in asdict(self).items()}


def validate_structure(params: StructureParams, M: float = 0.0, strict: bool = False) -> dict:
    """Check every structure constraint separately and report κ (maximum principle) and k (Harnack)."""
    violations: list[str] = []
    if params.a <= 0:
        violations.append(f"a > 0 violated (a={params.a})")
    if params.abar <= 0:
        violations.append(f"abar > 0 violated (abar={params.abar})")
    if params.a > params.abar:
        violations.append(f"a <= abar violated ({params.a} > {params.abar})")
    for name in ("norm_b", "norm_c", "norm_d", "norm_e", "norm_f", "norm_g", "norm_h"):
        if getattr(params, name) < 0:
            violations.append(f"{name} >= 0 violated ({getattr(params, name)})")
    if params.N <= 2:
        violations.append(f"N > 2 violated (N={params.N})")
    if params.p <= 2:
        violations.append(f"p > 2 violated (p={params.p})")
    if params.q < 1 or params.beta < 1:
        violations.append("q >= 1 and beta >= 1 required")
    if params.alpha <= 1:
        violations.append(f"alpha > 1 violated (alpha={params.alpha})")
    first = params.N / 2.0 * _inv(params.p) + _inv(params.q)
    if not first < 0.5:
        violations.append(f"N/(2p) + 1/q < 1/2 violated ({first:.6g})")
    second = params.N / 2.0 * _inv(params.alpha) + _inv(params.beta)
    if not second < 1.0:
        violations.append(f"N/(2 alpha) + 1/beta < 1 violated ({second:.6g})")

    theta_max: Optional[float] = None
    if not violations:
        try:
            theta_max = compute_theta(params.p, params.q, params.alpha, params.beta, params.N)
        except StructureError as exc:
            violations.extend(exc.violations)
    theta = params.theta if params.theta is not None else theta_max
    if params.theta is not None:
        if not 0.0 < params.theta < 1.0:
            violations.append(f"theta in (0, 1) violated (theta={params.theta})")
        elif theta_max is not None and params.theta > theta_max + 1e-15:
            violations.append(f"theta={params.theta} exceeds the largest admissible value {theta_max:.6g}")

    if strict and violations:
        raise StructureError(violations)
    kappa = (params.norm_b + params.norm_d) * abs(M) + params.norm_f + params.norm_g
    k = params.norm_f + params.norm_g + params.norm_h
    return {
        "type": "structure",
        "valid": not violations,
        "violations": violations,
        "theta": theta,
        "theta_max": theta_max,
        "kappa": kappa,
        "k": k,
        "M": M,
        "params": params.as_dict(),
    }


# ── Cutoffs and horizontal gradients ──────────────────────────────────────────

def _check_center(field: DistanceField, x0) -> None:
    if not np.allclose(field.origin, np.asarray(x0, dtype=float), atol=1e-12):
        raise HormlabError(f"distance field is centred at {list(field.origin)}, not {list(map(float, x0))}")


def cutoff(field: DistanceField, x0, r: float) -> GridFunction:
    """φ = clamp(2 − d(·, x0)/r, 0, 1): one on B(x0, r), zero outside B(x0, 2r)."""
    if r <= 0:
        raise HormlabError(f"r must be positive, got {r}")
    _check_center(field, x0)
    if field.boundary_min() <= 2 * r:
        raise DomainError(f"B(x0, {2 * r}) escapes the lattice")
    d = np.where(np.isfinite(field.values), field.values, np.inf)
    return GridFunction(field.lattice, np.clip(2.0 - d / r, 0.0, 1.0))


def horizontal_gradient(family: EpsilonFamily, u: GridFunction, frame: bool = False) -> np.ndarray:
    """(X_1 u, …, X_m u) at every node: array (*shape, m).

    With ``frame=True`` the derivatives run over every rescaled field X^ε_1..X^ε_p;
    at ε = 0 the extra columns vanish.
    """
    lattice = u.lattice
    if lattice.dim != family.dim:
        raise DimensionError(f"lattice dimension {lattice.dim} does not match the frame ({family.dim})")
    mesh = lattice.mesh()
    fields = family.rescaled if frame else family.rescaled[: family.table.m]
    return np.stack([apply_field(X(mesh), u.values, lattice) for X in fields], axis=-1)


def _gradient_energy(family: EpsilonFamily, u: GridFunction) -> np.ndarray:
    return np.sum(horizontal_gradient(family, u, frame=True) ** 2, axis=-1)


# ── Poincaré and Sobolev ratios ───────────────────────────────────────────────

def _check_lattice(u: GridFunction, field: DistanceField) -> None:
    if not u.lattice.same_as(field.lattice):
        raise DimensionError("the test function and the distance field live on different lattices")


def poincare_ratio(family: EpsilonFamily, u: GridFunction, field: DistanceField, x0, r: float) -> float:
    """∫_{B(x0,r)} |u − u_B|² / (r² ∫_{B(x0,2r)} |Xu|²) by lattice quadrature."""
    _check_lattice(u, field)
    _check_center(field, x0)
    if field.boundary_min() <= 2 * r:
        raise DomainError(f"B(x0, {2 * r}) escapes the lattice")
    small, large = field.ball_mask(r), field.ball_mask(2 * r)
    if not np.any(small):
        raise DegenerateRatioError(f"no lattice node lies in B(x0, {r})")
    mean = float(u.values[small].mean())
    numerator = u.with_values((u.values - mean) ** 2).integral(small)
    denominator = r ** 2 * u.with_values(_gradient_energy(family, u)).integral(large)
    if denominator <= 0:
        raise DegenerateRatioError(f"horizontal gradient vanishes on B(x0, {2 * r}) (numerator {numerator:.3g})")
    return numerator / denominator


def weighted_poincare_ratio(
    family: EpsilonFamily, u: GridFunction, field: DistanceField, x0, r: float, N: float
) -> dict:
    """∫ |u − u_φ|² φ / (r² ∫ |Xu|² φ) with φ the cutoff profile supported in B(x0, r)."""
    _check_lattice(u, field)
    phi = cutoff(field, x0, r / 2.0)
    mass = phi.integral()
    if mass <= 0:
        raise DegenerateRatioError("cutoff weight has zero mass")
    mean = float(np.sum(u.values * phi.values) / np.sum(phi.values))
    numerator = u.with_values((u.values - mean) ** 2 * phi.values).integral()
    denominator = r ** 2 * u.with_values(_gradient_energy(family, u) * phi.values).integral()
    if denominator <= 0:
        raise DegenerateRatioError("horizontal gradient vanishes on the support of the cutoff")
    return {
        "ratio": numerator / denominator,
        "weight_mass": mass,
        "weight_mass_power": mass ** (2.0 / N),
    }


def test_function_ensemble(
    lattice: Lattice,
    size: int,
    seed: int = 0,
    center: Optional[Sequence[float]] = None,
    scale: Optional[Sequence[float]] = None,
) -> list[GridFunction]:
    """Seeded members alternating random quadratics and random-Fourier modes in normalized coordinates."""
    if size < 1:
        raise HormlabError("ensemble size must be positive")
    mesh = lattice.mesh()
    c = np.asarray(center if center is not None else np.mean([lattice.lower, lattice.upper], axis=0))
    s = np.asarray(scale if scale is not None else (np.asarray(lattice.upper) - np.asarray(lattice.lower)) / 2)
    y = (mesh - c) / s
    members = []
    for i in range(size):
        rng = np.random.default_rng([seed, i])
        if i % 2 == 0:
            linear = rng.normal(size=lattice.dim)
            quad = rng.normal(size=(lattice.dim, lattice.dim))
            values = y @ linear + np.einsum("...i,ij,...j->...", y, 0.5 * (quad + quad.T), y)
        else:
            freq = rng.integers(1, 4, size=lattice.dim) * rng.choice([-1.0, 1.0], size=lattice.dim)
            values = np.cos(np.pi / 2 * (y @ freq) + rng.uniform(0, 2 * np.pi))
        members.append(GridFunction(lattice, values))
    return members


def poincare_constant_estimate(
    family: EpsilonFamily,
    x0,
    r: float,
    ensemble_size: int = 16,
    seed: int = 0,
    field: Optional[DistanceField] = None,
    ensemble: Optional[Sequence[GridFunction]] = None,
    resolution: int = DEFAULT_RESOLUTION,
    move_budget: int = DEFAULT_MOVE_BUDGET,
) -> float:
    """Max of poincare_ratio over a seeded ensemble: a lower bound for C_P."""
    return _poincare_scan(family, x0, r, ensemble_size, seed, field, ensemble, resolution, move_budget)["estimate"]


def _poincare_scan(family, x0, r, ensemble_size, seed, field, ensemble, resolution, move_budget) -> dict:
    point = np.asarray(x0, dtype=float)
    if field is None:
        lattice = fit_ball_lattice(family, point, 2 * r, resolution, move_budget)
        field = distance_field(family, point, h=2 * r / resolution, move_budget=move_budget, lattice=lattice)
    if ensemble is None:
        scale = np.abs(_ball_extent(field, 2 * r))
        ensemble = test_function_ensemble(field.lattice, ensemble_size, seed, center=point, scale=scale)

    ratios: list[Optional[float]] = []
    for member in ensemble:
        try:
            ratios.append(poincare_ratio(family, member, field, point, r))
        except DegenerateRatioError as exc:
            logger.debug("ensemble member skipped: %s", exc)
            ratios.append(None)
    usable = [x for x in ratios if x is not None]
    if not usable:
        raise DegenerateRatioError("every ensemble member is constant on the ball")
    return {"estimate": float(max(usable)), "ratios": ratios, "lattice": list(field.lattice.shape)}


def _ball_extent(field: DistanceField, r: float) -> np.ndarray:
    inside = field.lattice.mesh()[field.ball_mask(r)]
    return np.maximum(np.abs(inside - np.asarray(field.origin)).max(axis=0), np.asarray(field.lattice.spacing))


def sobolev_ratio(family: EpsilonFamily, u: GridFunction, p: float, N: float) -> float:
    """‖u‖_{Np/(N−p)} / ‖Xu‖_p for u vanishing on the lattice boundary."""
    if not 1 <= p < N:
        raise HormlabError(f"need 1 <= p < N, got p={p}, N={N}")
    boundary = u.lattice.boundary_mask()
    scale = float(np.abs(u.values).max())
    if np.any(np.abs(u.values[boundary]) > 1e-12 * max(scale, 1.0)):
        raise SupportError("u must vanish on the lattice boundary")
    grad = np.sqrt(_gradient_energy(family, u))
    grad_norm = u.lattice.integrate(grad ** p) ** (1.0 / p)
    if grad_norm <= 0:
        raise DegenerateRatioError("horizontal gradient vanishes identically")
    p_star = N * p / (N - p)
    return float(u.lattice.integrate(np.abs(u.values) ** p_star) ** (1.0 / p_star) / grad_norm)


# ── Entry points ──────────────────────────────────────────────────────────────

def run_poincare(
    table: CommutatorTable,
    x0: Sequence[float],
    epsilon: float,
    r: float,
    ensemble_size: int = 16,
    seed: int = 0,
    resolution: int = DEFAULT_RESOLUTION,
    move_budget: int = DEFAULT_MOVE_BUDGET,
) -> dict:
    family = rescale(table, epsilon)
    scan = _poincare_scan(family, x0, r, ensemble_size, seed, None, None, resolution, move_budget)
    return {
        "type": "poincare",
        "epsilon": family.epsilon,
        "x0": list(map(float, x0)),
        "r": r,
        "seed": seed,
        "ensemble_size": ensemble_size,
        **scan,
    }


def run_structure(params: StructureParams, M: float = 0.0) -> dict:
    return validate_structure(params, M)


__all__ = [
    "StructureParams",
    "compute_theta",
    "cutoff",
    "horizontal_gradient",
    "lpq_norm",
    "poincare_constant_estimate",
    "poincare_ratio",
    "run_poincare",
    "run_structure",
    "sobolev_ratio",
    "steklov",
    "test_function_ensemble",
    "validate_structure",
    "weighted_poincare_ratio",
]
