"""Exponential maps, lattice Carnot–Carathéodory distances, Monte-Carlo ball volumes and doubling ratios."""
from __future__ import annotations

import dataclasses
import itertools
import logging
from dataclasses import dataclass
from functools import cached_property
from math import factorial
from typing import Optional, Sequence, Union

import numpy as np
from scipy import sparse
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import KDTree
from statsmodels.stats.proportion import proportion_confint

from ..errors import DomainError, HormanderFailure, HormlabError, IntegrationError, ResolutionError
from .frames import (
    DEFAULT_C2,
    CommutatorTable,
    EpsilonFamily,
    IndexTuple,
    best_index,
    lambda_det,
    rescale,
    volume_polynomial,
)
from .lattice import Box, Lattice, apply_field

logger = logging.getLogger(__name__)

DEFAULT_C1 = 0.25
DEFAULT_MOVE_BUDGET = 3
DEFAULT_RESOLUTION = 12
DEFAULT_CONFIDENCE = 0.95
EXP_TOL = 1e-10
REALIZE_TOL = 1e-6

_FAR = 1e30
_EDGE_CHUNK = 200_000


# ── Exponential map ───────────────────────────────────────────────────────────

def _as_index(family: EpsilonFamily, I: Union[IndexTuple, Sequence[int]]) -> IndexTuple:
    return I if isinstance(I, IndexTuple) else IndexTuple.of(family, I)


def _coefficients(family: EpsilonFamily, I: IndexTuple, v, u) -> np.ndarray:
    """Per-sample weights on the extended family: array (B, size)."""
    comp = I.complement(family)
    u = np.atleast_2d(np.asarray(u, dtype=float))
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        v = np.zeros((u.shape[0], len(comp)))
    v = np.atleast_2d(v)
    if u.shape[-1] != len(I.indices):
        raise HormlabError(f"u needs {len(I.indices)} coordinates, got {u.shape[-1]}")
    if v.shape[-1] != len(comp):
        raise HormlabError(f"v needs {len(comp)} coordinates, got {v.shape[-1]}")
    if v.shape[0] == 1 and u.shape[0] > 1:
        v = np.repeat(v, u.shape[0], axis=0)
    if u.shape[0] == 1 and v.shape[0] > 1:
        u = np.repeat(u, v.shape[0], axis=0)
    if u.shape[0] != v.shape[0]:
        raise HormlabError(f"{u.shape[0]} u samples do not match {v.shape[0]} v samples")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise HormlabError("u and v must be finite")
    coeffs = np.zeros((u.shape[0], family.size))
    coeffs[:, list(I.indices)] = u
    if comp:
        coeffs[:, list(comp)] = v
    return coeffs


def _rk4(family: EpsilonFamily, x: np.ndarray, coeffs: np.ndarray, steps: int) -> np.ndarray:
    def rhs(y: np.ndarray) -> np.ndarray:
        return np.einsum("bs,bsd->bd", coeffs, family.evaluate(y))

    y = np.broadcast_to(x, (coeffs.shape[0], family.dim)).astype(float)
    dt = 1.0 / steps
    for _ in range(steps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * dt * k1)
        k3 = rhs(y + 0.5 * dt * k2)
        k4 = rhs(y + dt * k3)
        y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise IntegrationError("non-finite state while integrating the frozen flow")
    return y


def integrate_flow(family: EpsilonFamily, x: np.ndarray, coeffs: np.ndarray, tol: float = EXP_TOL,
                   max_steps: int = 1 << 14) -> np.ndarray:
    """Time-1 flow with one step count for the whole batch, doubled until successive runs agree to ``tol``."""
    steps = 2
    coarse = _rk4(family, x, coeffs, steps)
    while True:
        fine = _rk4(family, x, coeffs, 2 * steps)
        err = float(np.max(np.abs(fine - coarse))) if fine.size else 0.0
        if err < tol:
            logger.debug("exp map: %d RK4 steps, step-doubling difference %.2e", 2 * steps, err)
            return fine
        steps *= 2
        if steps >= max_steps:
            raise IntegrationError(f"flow did not settle below {tol} with {steps} steps (difference {err:.2e})")
        coarse = fine


def exp_map(family: EpsilonFamily, x, I, v, u) -> np.ndarray:
    """Φ(u) = time-1 flow from x of Σ_j u_j Y_{i_j} + Σ_k v_k Y_{i_k}; batched over leading axes of u."""
    I = _as_index(family, I)
    point = np.asarray(x, dtype=float)
    coeffs = _coefficients(family, I, v, u)
    out = integrate_flow(family, point, coeffs)
    return out[0] if np.ndim(u) == 1 else out


def _stencil_steps(u: np.ndarray) -> np.ndarray:
    return np.cbrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(u))


def exp_jacobian_matrix(family: EpsilonFamily, x, I, v, u) -> tuple[np.ndarray, np.ndarray]:
    """(Φ(u), ∂Φ/∂u) by central differences: arrays (B, dim) and (B, dim, n)."""
    I = _as_index(family, I)
    point = np.asarray(x, dtype=float)
    base = _coefficients(family, I, v, u)
    B, n = base.shape[0], len(I.indices)
    u2 = base[:, list(I.indices)]
    h = _stencil_steps(u2)

    stencil = np.repeat(base[:, None, :], 2 * n + 1, axis=1)
    for j, col in enumerate(I.indices):
        stencil[:, 2 * j, col] += h[:, j]
        stencil[:, 2 * j + 1, col] -= h[:, j]
    images = integrate_flow(family, point, stencil.reshape(-1, family.size)).reshape(B, 2 * n + 1, family.dim)

    jac = np.empty((B, family.dim, n))
    for j in range(n):
        jac[:, :, j] = (images[:, 2 * j] - images[:, 2 * j + 1]) / (2.0 * h[:, j, None])
    return images[:, -1], jac


def exp_jacobian(family: EpsilonFamily, x, I, v, u) -> Union[float, np.ndarray]:
    _, jac = exp_jacobian_matrix(family, x, I, v, u)
    det = np.linalg.det(jac)
    return float(det[0]) if np.ndim(u) == 1 else det


def _box_samples(rng: np.random.Generator, scale: np.ndarray, n: int) -> np.ndarray:
    return (2.0 * rng.random((n, scale.size)) - 1.0) * scale


def _check_constants(r: float, C1: float, C2: float, R: Optional[float]) -> None:
    if r <= 0:
        raise HormlabError(f"r must be positive, got {r}")
    for name, value in (("C1", C1), ("C2", C2)):
        if not 0.0 < value < 1.0:
            raise HormlabError(f"{name} must lie in (0, 1), got {value}")
    if R is not None and r >= R:
        raise DomainError(f"r={r} is not below the admissible radius R={R}")


def _box_scales(family: EpsilonFamily, I: IndexTuple, r: float, C1: float, C2: float) -> tuple[np.ndarray, np.ndarray]:
    comp = I.complement(family)
    u_scale = np.array([C1 * r ** family.degrees_eps[i] for i in I.indices])
    v_scale = np.array([C2 * r ** family.degrees_eps[k] for k in comp])
    return u_scale, v_scale


def jacobian_bound_check(
    family: EpsilonFamily,
    x,
    r: float,
    C1: float = DEFAULT_C1,
    C2: float = DEFAULT_C2,
    samples: int = 1000,
    seed: int = 0,
    R: Optional[float] = None,
) -> dict:
    """Sample |JΦ| / |λ_I(x)| over Q_ε(C1 r) × (C2-box of v) and test the window [1/4, 4]."""
    _check_constants(r, C1, C2, R)
    point = np.asarray(x, dtype=float)
    I = best_index(family, point, r, C2)
    lam = lambda_det(family, point, I)
    u_scale, v_scale = _box_scales(family, I, r, C1, C2)

    rng = np.random.default_rng(seed)
    u = _box_samples(rng, u_scale, samples)
    v = _box_samples(rng, v_scale, samples)
    ratio = np.abs(exp_jacobian(family, point, I, v, u)) / abs(lam)

    return {
        "type": "jacobian_bound",
        "epsilon": family.epsilon,
        "x": point.tolist(),
        "r": r,
        "C1": C1,
        "C2": C2,
        "samples": samples,
        "seed": seed,
        "index": list(I.indices),
        "lambda": lam,
        "ratio_min": float(ratio.min()),
        "ratio_max": float(ratio.max()),
        "pass": bool(ratio.min() >= 0.25 and ratio.max() <= 4.0),
    }


def injectivity_check(
    family: EpsilonFamily,
    x,
    r: float,
    C1: float = DEFAULT_C1,
    C2: float = DEFAULT_C2,
    samples: int = 1000,
    seed: int = 0,
) -> dict:
    """Look for sampled u ≠ u' in Q_ε(C1 r) with Φ(u) ≈ Φ(u') at one fixed sampled v."""
    _check_constants(r, C1, C2, None)
    point = np.asarray(x, dtype=float)
    I = best_index(family, point, r, C2)
    u_scale, v_scale = _box_scales(family, I, r, C1, C2)

    rng = np.random.default_rng(seed)
    v = _box_samples(rng, v_scale, 1)
    u = _box_samples(rng, u_scale, samples)
    images = exp_map(family, point, I, v, u)

    # nearest neighbours in image space, compared in box-normalized u coordinates
    u_norm = u / u_scale
    img_scale = np.maximum(np.ptp(images, axis=0), np.finfo(float).tiny)
    dist_img, nn = KDTree(images / img_scale).query(images / img_scale, k=2)
    du = np.linalg.norm(u_norm - u_norm[nn[:, 1]], axis=1)
    ratio = dist_img[:, 1] / np.maximum(du, np.finfo(float).tiny)
    collisions = int(np.sum((dist_img[:, 1] < 1e-12) & (du > 1e-9)))

    return {
        "type": "injectivity",
        "epsilon": family.epsilon,
        "x": point.tolist(),
        "r": r,
        "samples": samples,
        "seed": seed,
        "index": list(I.indices),
        "min_separation_ratio": float(ratio.min()),
        "collisions": collisions,
        "pass": collisions == 0 and bool(ratio.min() > 0.0),
    }


# ── Lattice distance ──────────────────────────────────────────────────────────

def graded_spacing(family: EpsilonFamily, x, h: float) -> np.ndarray:
    """h_j = max_i |Y^ε_{i,j}(x)| h^{d_ε(i)} / d_ε(i)!: the per-axis reach of one step of size h."""
    if h <= 0:
        raise HormlabError(f"h must be positive, got {h}")
    values = np.abs(family.evaluate(np.asarray(x, dtype=float)))
    scales = np.array([h ** d / factorial(d) for d in family.degrees_eps])
    spacing = (values * scales[:, None]).max(axis=0)
    if np.any(spacing <= 0):
        raise HormanderFailure(f"no extended field moves along axes {np.flatnonzero(spacing <= 0).tolist()}")
    return spacing


@dataclass(frozen=True, eq=False)
class DistanceField:
    origin: tuple[float, ...]
    epsilon: float
    lattice: Lattice
    values: np.ndarray = dataclasses.field(repr=False)
    move_budget: int
    h: float

    @cached_property
    def _interpolator(self) -> RegularGridInterpolator:
        finite = np.where(np.isfinite(self.values), self.values, _FAR)
        return RegularGridInterpolator(self.lattice.axes(), finite, bounds_error=False, fill_value=np.inf)

    def value_at(self, points: np.ndarray) -> np.ndarray:
        """Linear interpolation of the nodal distances; inf outside the lattice."""
        return self._interpolator(np.asarray(points, dtype=float))

    def ball_mask(self, r: float) -> np.ndarray:
        return self.values <= r

    def in_ball(self, points: np.ndarray, r: float) -> np.ndarray:
        """Closed-ball membership of arbitrary points, with the same <= r cut as ``ball_mask``."""
        return self.value_at(points) <= r

    def boundary_min(self) -> float:
        return float(self.values[self.lattice.boundary_mask()].min())

    @property
    def origin_index(self) -> tuple[int, ...]:
        return tuple(int(i) for i in self.lattice.nearest_index(self.origin))

    @property
    def reachable_fraction(self) -> float:
        return float(np.isfinite(self.values).mean())


def _controls(p: int, move_budget: int) -> np.ndarray:
    span = range(-move_budget, move_budget + 1)
    grid = np.array(list(itertools.product(span, repeat=p)), dtype=float)
    return grid[np.any(grid != 0, axis=1)]


def _active_frame(family: EpsilonFamily, points: np.ndarray) -> np.ndarray:
    return family.frame(points)[..., list(family.active)]


def _lattice_edges(
    family: EpsilonFamily, lattice: Lattice, h: float, move_budget: int, realize_tol: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Undirected edges (a, b, cost) between nodes joined by a first-order realizable sub-unit move."""
    pts = lattice.points()
    N = lattice.size
    lower, spacing = np.asarray(lattice.lower), np.asarray(lattice.spacing)
    shape = np.asarray(lattice.shape)
    frame0 = _active_frame(family, pts)
    nodes = np.arange(N, dtype=np.int64)

    keys = []
    candidates = 0
    for n in _controls(len(family.active), move_budget):
        w = h * n
        mid = pts + 0.5 * frame0 @ w
        end = pts + _active_frame(family, mid) @ w
        idx = np.rint((end - lower) / spacing).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < shape), axis=1)
        b = np.ravel_multi_index(tuple(idx[inside].T), lattice.shape)
        a = nodes[inside]
        keep = a != b
        a, b = a[keep], b[keep]
        candidates += a.size
        keys.append(np.unique(np.minimum(a, b) * N + np.maximum(a, b)))
    keys = np.unique(np.concatenate(keys)) if keys else np.empty(0, dtype=np.int64)

    src, dst, cost = [], [], []
    for start in range(0, keys.size, _EDGE_CHUNK):
        chunk = keys[start:start + _EDGE_CHUNK]
        a, b = chunk // N, chunk % N
        delta = pts[b] - pts[a]
        F = _active_frame(family, 0.5 * (pts[a] + pts[b]))
        w = np.einsum("epd,ed->ep", np.linalg.pinv(F), delta)
        residual = np.abs(np.einsum("edp,ep->ed", F, w) - delta)
        norm = np.linalg.norm(w, axis=1)
        ok = np.all(residual <= realize_tol * spacing, axis=1) & (norm > 0)
        ok &= norm <= (move_budget + 1) * h * np.sqrt(len(family.active))
        src.append(a[ok])
        dst.append(b[ok])
        cost.append(norm[ok])

    src = np.concatenate(src) if src else np.empty(0, dtype=np.int64)
    dst = np.concatenate(dst) if dst else np.empty(0, dtype=np.int64)
    cost = np.concatenate(cost) if cost else np.empty(0)
    if keys.size and src.size < 0.1 * keys.size:
        logger.warning("realizability test kept %d of %d candidate edges", src.size, keys.size)
    logger.debug("%d candidate moves, %d distinct pairs, %d edges", candidates, keys.size, src.size)
    return src, dst, cost


def distance_field(
    family: EpsilonFamily,
    origin,
    box: Optional[Box] = None,
    h: float = 0.01,
    move_budget: int = DEFAULT_MOVE_BUDGET,
    *,
    lattice: Optional[Lattice] = None,
    realize_tol: float = REALIZE_TOL,
) -> DistanceField:
    """Shortest-path approximation of d_ε(origin, ·) on a graded lattice over ``box``.

    Node a is joined to node b when the midpoint-RK2 endpoint of a control
    ``h * n`` (n in {-k..k}^p over the non-vanishing rescaled fields) rounds to
    b and Δ = b − a is reproduced by the minimal-norm control at (a + b) / 2.
    The edge cost is that control's Euclidean norm.
    """
    if h <= 0:
        raise HormlabError(f"h must be positive, got {h}")
    if move_budget < 1:
        raise HormlabError(f"move_budget must be >= 1, got {move_budget}")
    point = np.asarray(origin, dtype=float)
    if lattice is None:
        if box is None:
            raise HormlabError("either a box or a lattice is required")
        if not box.contains(point):
            raise DomainError(f"origin {point.tolist()} is outside the box")
        lattice = Lattice.around(point, box, graded_spacing(family, point, h))
    elif not lattice.box.contains(point):
        raise DomainError(f"origin {point.tolist()} is outside the lattice")

    src, dst, cost = _lattice_edges(family, lattice, h, move_budget, realize_tol)
    graph = sparse.csr_matrix((cost, (src, dst)), shape=(lattice.size, lattice.size))
    start = int(lattice.flat_index(lattice.nearest_index(point)))
    values = dijkstra(graph, directed=False, indices=start).reshape(lattice.shape)

    reached = np.isfinite(values)
    extent = np.ptp(lattice.mesh()[reached], axis=0)
    if np.any(extent <= 0):
        raise ResolutionError(
            f"lattice paths from {point.tolist()} cannot leave the axes {np.flatnonzero(extent <= 0).tolist()}; "
            f"refine the lattice or raise move_budget"
        )
    result = DistanceField(tuple(point), family.epsilon, lattice, values, move_budget, float(h))
    logger.info(
        "distance field eps=%g: %d nodes, %d edges, %.1f%% unreachable",
        family.epsilon, lattice.size, src.size, 100.0 * (1.0 - result.reachable_fraction),
    )
    return result


def _ceil_counts(extent: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    return np.maximum(np.ceil(extent / spacing - 1e-9), 1).astype(int)


def fit_ball_lattice(
    family: EpsilonFamily,
    x,
    rho: float,
    resolution: int = DEFAULT_RESOLUTION,
    move_budget: int = DEFAULT_MOVE_BUDGET,
    coarse_resolution: int = 6,
    max_attempts: int = 4,
) -> Lattice:
    """Graded lattice centred at x with base step rho / resolution that contains B_ε(x, rho).

    A coarse pass at step rho / coarse_resolution locates the ball; the fine
    lattice covers its bounding box enlarged by 30% plus two coarse cells.
    """
    if rho <= 0:
        raise HormlabError(f"rho must be positive, got {rho}")
    point = np.asarray(x, dtype=float)
    extent = 1.5 * graded_spacing(family, point, rho)
    coarse_h = rho / coarse_resolution
    coarse_spacing = graded_spacing(family, point, coarse_h)

    for _ in range(max_attempts):
        coarse = Lattice.centered(point, coarse_spacing, _ceil_counts(extent, coarse_spacing))
        field = distance_field(family, point, h=coarse_h, move_budget=move_budget, lattice=coarse)
        if field.boundary_min() > rho:
            break
        extent = 2.0 * extent
    else:
        raise DomainError(f"could not enclose B(x, {rho}) after {max_attempts} enlargements")

    inside = coarse.mesh()[field.ball_mask(rho)]
    reach = np.abs(inside - point).max(axis=0)
    spacing = graded_spacing(family, point, rho / resolution)
    return Lattice.centered(point, spacing, _ceil_counts(1.3 * reach + 2.0 * coarse_spacing, spacing))


def lipschitz_constant(family: EpsilonFamily, field: DistanceField) -> float:
    """C_L = max |X^ε d(·, origin)| over interior nodes with finite stencils, away from the origin."""
    lattice = field.lattice
    values = np.where(np.isfinite(field.values), field.values, np.nan)
    mesh = lattice.mesh()
    sq = np.zeros(lattice.shape)
    for vf in family.rescaled:
        if not vf.is_zero:
            sq = sq + apply_field(vf(mesh), values, lattice) ** 2
    grad = np.sqrt(sq)
    valid = np.isfinite(grad) & ~lattice.boundary_mask() & (values > 2.0 * field.h)
    if not np.any(valid):
        raise ResolutionError("no interior nodes available to measure the Lipschitz constant")
    return float(grad[valid].max())


# ── Volumes ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class VolumeEstimate:
    mean: float
    half_width: float
    samples: int
    hits: int = 0
    box_volume: float = 0.0

    def as_dict(self) -> dict:
        return {
            "volume": self.mean,
            "ci_half_width": self.half_width,
            "samples": self.samples,
            "hits": self.hits,
            "box_volume": self.box_volume,
        }


def _ball_box(field: DistanceField, r: float) -> Box:
    lattice = field.lattice
    inside = lattice.mesh()[field.ball_mask(r)]
    spacing = np.asarray(lattice.spacing)
    lower = np.maximum(inside.min(axis=0) - spacing, lattice.lower)
    upper = np.minimum(inside.max(axis=0) + spacing, lattice.upper)
    return Box(tuple(lower), tuple(upper))


def ball_volume(
    family: EpsilonFamily,
    x,
    r: float,
    box: Optional[Box] = None,
    n_samples: int = 100_000,
    field: Optional[DistanceField] = None,
    seed: int = 0,
    confidence: float = DEFAULT_CONFIDENCE,
    resolution: int = DEFAULT_RESOLUTION,
    move_budget: int = DEFAULT_MOVE_BUDGET,
) -> VolumeEstimate:
    """Monte-Carlo Lebesgue measure of {y : d_ε(x, y) <= r} with a Wilson confidence half-width."""
    if r <= 0:
        raise HormlabError(f"r must be positive, got {r}")
    if n_samples < 1:
        raise HormlabError("n_samples must be positive")
    if field is None:
        lattice = fit_ball_lattice(family, x, r, resolution, move_budget)
        field = distance_field(family, x, h=r / resolution, move_budget=move_budget, lattice=lattice)
    if field.boundary_min() <= r:
        raise DomainError(f"B(x, {r}) reaches the lattice boundary (boundary distance {field.boundary_min():.4g})")
    if not np.any(field.ball_mask(r)):
        raise ResolutionError(f"no lattice node lies in B(x, {r})")
    box = box or _ball_box(field, r)

    rng = np.random.default_rng(seed)
    points = box.sample(rng, n_samples)
    hits = int(np.count_nonzero(field.in_ball(points, r)))
    lo, hi = proportion_confint(hits, n_samples, alpha=1.0 - confidence, method="wilson")
    return VolumeEstimate(
        mean=box.volume * hits / n_samples,
        half_width=box.volume * (hi - lo) / 2.0,
        samples=n_samples,
        hits=hits,
        box_volume=box.volume,
    )


def doubling_ratio(
    family: EpsilonFamily,
    x,
    r: float,
    n_samples: int = 100_000,
    seed: int = 0,
    resolution: int = DEFAULT_RESOLUTION,
    move_budget: int = DEFAULT_MOVE_BUDGET,
    field: Optional[DistanceField] = None,
) -> dict:
    """|B(x, 2r)| / |B(x, r)| with the same sample stream for both balls.

    Each ball gets its own fitted lattice unless a shared ``field`` reaching past 2r is given.
    """
    small = ball_volume(family, x, r, n_samples=n_samples, field=field, seed=seed,
                        resolution=resolution, move_budget=move_budget)
    large = ball_volume(family, x, 2 * r, n_samples=n_samples, field=field, seed=seed,
                        resolution=resolution, move_budget=move_budget)
    if small.mean <= 0:
        raise ResolutionError(f"B(x, {r}) has no sampled volume")
    ratio = large.mean / small.mean
    low = (large.mean - large.half_width) / (small.mean + small.half_width)
    high = (large.mean + large.half_width) / max(small.mean - small.half_width, np.finfo(float).tiny)
    return {
        "type": "doubling",
        "epsilon": family.epsilon,
        "x": np.asarray(x, dtype=float).tolist(),
        "r": r,
        "volume_r": small.as_dict(),
        "volume_2r": large.as_dict(),
        "ratio": ratio,
        "ratio_low": low,
        "ratio_high": high,
        "C_D": 1.0 / ratio,
    }


def nsw_sandwich_check(
    table: CommutatorTable,
    x,
    r_list: Sequence[float],
    eps_list: Sequence[float],
    n_samples: int = 100_000,
    seed: int = 0,
    resolution: int = DEFAULT_RESOLUTION,
    move_budget: int = DEFAULT_MOVE_BUDGET,
    spread_factor: float = 32.0,
    regime_factor: float = 8.0,
    R: Optional[float] = None,
) -> dict:
    """c(ε, r) = |B_ε(x, r)| / Λ_ε(x, r) over the (ε, r) grid with its overall and per-regime spreads."""
    if R is not None and any(r >= R for r in r_list):
        raise DomainError(f"every radius must be below R={R}")
    point = np.asarray(x, dtype=float)
    rows = []
    for eps in eps_list:
        family = rescale(table, eps)
        for r in r_list:
            vol = ball_volume(family, point, r, n_samples=n_samples, seed=seed,
                              resolution=resolution, move_budget=move_budget)
            lam = volume_polynomial(family, point, r)
            rows.append({
                "epsilon": float(eps),
                "r": float(r),
                "volume": vol.mean,
                "ci": vol.half_width,
                "lambda": lam,
                "ratio": vol.mean / lam,
                "regime": "eps<r" if eps < r else "r<=eps",
            })

    def spread(values: list[float]) -> float:
        return max(values) / min(values) if values and min(values) > 0 else float("inf")

    overall = spread([row["ratio"] for row in rows])
    regimes = {
        name: spread([row["ratio"] for row in rows if row["regime"] == name])
        for name in sorted({row["regime"] for row in rows})
    }
    return {
        "type": "nsw_sandwich",
        "x": point.tolist(),
        "rows": rows,
        "spread": overall,
        "regime_spread": regimes,
        "spread_factor": spread_factor,
        "regime_factor": regime_factor,
        "pass": bool(overall <= spread_factor and all(s <= regime_factor for s in regimes.values())),
    }


# ── Ball inclusions ───────────────────────────────────────────────────────────

def _preimages(family: EpsilonFamily, point: np.ndarray, I: IndexTuple, targets: np.ndarray,
               guesses: np.ndarray, iterations: int = 12) -> tuple[np.ndarray, np.ndarray]:
    """Newton solve of Φ(u) = target (v = 0) from the given starting u; returns (u, residual)."""
    u = guesses.copy()
    v = np.zeros((u.shape[0], family.size - family.dim))
    residual = np.full(u.shape[0], np.inf)
    for _ in range(iterations):
        image, jac = exp_jacobian_matrix(family, point, I, v, u)
        miss = image - targets
        residual = np.linalg.norm(miss, axis=1)
        try:
            step = np.linalg.solve(jac, miss[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.einsum("bnd,bd->bn", np.linalg.pinv(jac), miss)
        u = u - step
    image = exp_map(family, point, I, v, u)
    return u, np.linalg.norm(np.atleast_2d(image) - targets, axis=1)


def ball_inclusion_check(
    family: EpsilonFamily,
    x,
    r: float,
    C1: float = DEFAULT_C1,
    C2: float = DEFAULT_C2,
    samples: int = 1000,
    field: Optional[DistanceField] = None,
    seed: int = 0,
    move_budget: int = DEFAULT_MOVE_BUDGET,
) -> dict:
    """Inner inclusion Φ(Q_ε(C1 r)) ⊂ B_ε(x, r) and outer inclusion B_ε(x, r) ⊂ Φ(Q_ε(C1 r / C2))."""
    _check_constants(r, C1, C2, None)
    point = np.asarray(x, dtype=float)
    if field is None:
        lattice = fit_ball_lattice(family, point, r, 20, move_budget)
        field = distance_field(family, point, h=r / 20, move_budget=move_budget, lattice=lattice)
    if field.h > r / 20 * (1 + 1e-9):
        raise ResolutionError(f"lattice step {field.h:.3g} is coarser than r/20 = {r / 20:.3g}")

    I = best_index(family, point, r, C2)
    u_scale, v_scale = _box_scales(family, I, r, C1, C2)
    rng = np.random.default_rng(seed)

    u = _box_samples(rng, u_scale, samples)
    v = _box_samples(rng, v_scale, samples)
    inner_dist = field.value_at(exp_map(family, point, I, v, u))
    inner_ok = inner_dist <= r + field.h

    ball_nodes = field.lattice.points()[field.ball_mask(r).ravel()]
    if ball_nodes.shape[0] > samples:
        ball_nodes = ball_nodes[rng.choice(ball_nodes.shape[0], samples, replace=False)]
    outer_scale = u_scale / C2
    probes = _box_samples(rng, outer_scale, samples)
    probe_images = exp_map(family, point, I, np.zeros(family.size - family.dim), probes)
    spacing = np.asarray(field.lattice.spacing)
    _, nearest = KDTree(probe_images / spacing).query(ball_nodes / spacing)
    pre, residual = _preimages(family, point, I, ball_nodes, probes[nearest])
    outer_ok = (residual <= field.h) & np.all(np.abs(pre) <= outer_scale * (1 + 1e-9), axis=1)

    return {
        "type": "ball_inclusion",
        "epsilon": family.epsilon,
        "x": point.tolist(),
        "r": r,
        "C1": C1,
        "C2": C2,
        "h": field.h,
        "index": list(I.indices),
        "inner_samples": samples,
        "inner_failures": int(np.count_nonzero(~inner_ok)),
        "inner_rate": float(inner_ok.mean()),
        "inner_max_distance": float(inner_dist.max()),
        "outer_samples": int(ball_nodes.shape[0]),
        "outer_failures": int(np.count_nonzero(~outer_ok)),
        "outer_rate": float(outer_ok.mean()) if outer_ok.size else 1.0,
        "pass": bool(inner_ok.all() and outer_ok.all()),
    }


# ── Entry points ──────────────────────────────────────────────────────────────

def run_distance(
    table: CommutatorTable,
    origin: Sequence[float],
    epsilon: float,
    box: Box,
    h: float,
    move_budget: int = DEFAULT_MOVE_BUDGET,
    probes: Optional[Sequence[Sequence[float]]] = None,
) -> tuple[DistanceField, dict]:
    family = rescale(table, epsilon)
    field = distance_field(family, origin, box, h, move_budget)
    finite = field.values[np.isfinite(field.values)]
    report = {
        "type": "distance",
        "epsilon": family.epsilon,
        "origin": list(field.origin),
        "h": h,
        "move_budget": move_budget,
        "shape": list(field.lattice.shape),
        "spacing": list(field.lattice.spacing),
        "reachable_fraction": field.reachable_fraction,
        "max_distance": float(finite.max()),
        "lipschitz_constant": lipschitz_constant(family, field),
    }
    if probes:
        pts = np.asarray(probes, dtype=float)
        report["probes"] = [{"point": p.tolist(), "distance": float(d)} for p, d in zip(pts, field.value_at(pts))]
    return field, report


def run_volume(
    table: CommutatorTable,
    x: Sequence[float],
    epsilon: float,
    r: float,
    n_samples: int = 100_000,
    seed: int = 0,
    resolution: int = DEFAULT_RESOLUTION,
    move_budget: int = DEFAULT_MOVE_BUDGET,
) -> dict:
    family = rescale(table, epsilon)
    vol = ball_volume(family, x, r, n_samples=n_samples, seed=seed, resolution=resolution, move_budget=move_budget)
    lam = volume_polynomial(family, np.asarray(x, dtype=float), r)
    return {
        "type": "volume",
        "epsilon": family.epsilon,
        "x": list(map(float, x)),
        "r": r,
        "seed": seed,
        **vol.as_dict(),
        "lambda": lam,
        "ratio": vol.mean / lam,
    }


def run_doubling(
    table: CommutatorTable,
    x: Sequence[float],
    epsilon: float,
    r: float,
    n_samples: int = 100_000,
    seed: int = 0,
    resolution: int = DEFAULT_RESOLUTION,
    move_budget: int = DEFAULT_MOVE_BUDGET,
) -> dict:
    report = doubling_ratio(rescale(table, epsilon), x, r, n_samples, seed, resolution, move_budget)
    report["seed"] = seed
    return report


def run_jacobian(
    table: CommutatorTable,
    x: Sequence[float],
    epsilon: float,
    r: float,
    C1: float = DEFAULT_C1,
    C2: float = DEFAULT_C2,
    samples: int = 1000,
    seed: int = 0,
    R: Optional[float] = None,
) -> dict:
    family = rescale(table, epsilon)
    point = np.asarray(x, dtype=float)
    report = jacobian_bound_check(family, point, r, C1, C2, samples, seed, R)
    injectivity = injectivity_check(family, point, r, C1, C2, samples, seed)
    report["injectivity"] = injectivity
    report["pass"] = bool(report["pass"] and injectivity["pass"])
    return report
