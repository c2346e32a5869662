"""Parabolic cylinders, Harnack / maximum-principle harnesses and the ε-stability sweep."""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from ..errors import DegenerateRatioError, DimensionError, DomainError, HormlabError, ResolutionError
from .frames import CommutatorTable, frame_from_spec, frame_spec, rescale
from .functional import compute_theta, poincare_constant_estimate
from .lattice import GridFunction, SpaceTimeGridFunction
from .metric import DEFAULT_MOVE_BUDGET, DistanceField, distance_field, doubling_ratio, fit_ball_lattice
from .pde import ParabolicProblem, SchemeConfig, data_expression, solve

logger = logging.getLogger(__name__)

DEFAULT_OFFSET = 1e-12
DEFAULT_PAIR_BUDGET = 4_000_000

REGIONS = ("Q", "Qplus", "Qminus", "Dplus", "Dminus")

# (ball radius / rho, window start / rho², window end / rho²) relative to (xbar, tbar)
_REGION_SHAPES = {
    "Q": (3.0, -9.0, 0.0),
    "Qplus": (1.0, -1.0, 0.0),
    "Qminus": (1.0, -8.0, -7.0),
    "Dplus": (0.5, -1.0, -0.5),
    "Dminus": (0.5, -7.5, -7.0),
}


# ── Cylinders ─────────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class CylinderSet:
    """Space-time node masks (nt, *shape) of the five cylinders around (xbar, tbar)."""

    xbar: tuple[float, ...]
    tbar: float
    rho: float
    times: np.ndarray = field(repr=False)
    Q: np.ndarray = field(repr=False)
    Qplus: np.ndarray = field(repr=False)
    Qminus: np.ndarray = field(repr=False)
    Dplus: np.ndarray = field(repr=False)
    Dminus: np.ndarray = field(repr=False)

    def mask(self, region: str) -> np.ndarray:
        if region not in REGIONS:
            raise HormlabError(f"unknown region {region!r}")
        return getattr(self, region)

    def counts(self) -> dict[str, int]:
        return {name: int(np.count_nonzero(self.mask(name))) for name in REGIONS}


def _times_of(grid: Union[SpaceTimeGridFunction, Sequence[float], np.ndarray]) -> np.ndarray:
    if isinstance(grid, SpaceTimeGridFunction):
        return grid.times
    return np.asarray(grid, dtype=float)


def make_cylinders(
    field: DistanceField,
    xbar,
    tbar: float,
    rho: float,
    times: Union[SpaceTimeGridFunction, Sequence[float], np.ndarray],
    R: Optional[float] = None,
) -> CylinderSet:
    """Node masks of Q, Q⁺, Q⁻, D⁺ and D⁻ with spatial membership d_ε(xbar, ·) ≤ radius.

    Time windows are closed and matched with a tolerance of 1e-9 ρ².
    """
    if rho <= 0:
        raise HormlabError(f"rho must be positive, got {rho}")
    point = np.asarray(xbar, dtype=float)
    if not np.allclose(field.origin, point, atol=1e-12):
        raise HormlabError(f"distance field is centred at {list(field.origin)}, not {point.tolist()}")
    if R is not None and rho >= 20 * R:
        raise DomainError(f"rho={rho} is not below 20R={20 * R}")
    if field.boundary_min() <= 3 * rho:
        raise DomainError(f"B(xbar, {3 * rho}) escapes the lattice (boundary distance {field.boundary_min():.4g})")

    t = _times_of(times)
    tol = 1e-9 * rho ** 2
    if tbar > t[-1] + tol or tbar - 9 * rho ** 2 < t[0] - tol:
        raise DomainError(f"time window [{tbar - 9 * rho ** 2:.6g}, {tbar:.6g}] leaves [{t[0]:.6g}, {t[-1]:.6g}]")

    masks = {}
    expand = (slice(None),) + (None,) * field.lattice.dim
    for name, (radius, start, end) in _REGION_SHAPES.items():
        in_time = (t >= tbar + start * rho ** 2 - tol) & (t <= tbar + end * rho ** 2 + tol)
        masks[name] = in_time[expand] & field.ball_mask(radius * rho)[None]
        if not masks[name].any():
            raise ResolutionError(f"region {name} of the rho={rho} cylinder contains no space-time node")
    return CylinderSet(tuple(point), float(tbar), float(rho), t, **masks)


def parabolic_distance(field: DistanceField, point: tuple, others: tuple) -> np.ndarray:
    """max(d(x, y), √|t − s|) for (x, t) = ``point`` and (y, s) = ``others``, d from a field centred at x."""
    x, t = point
    ys, ss = others
    if not np.allclose(field.origin, np.asarray(x, dtype=float), atol=1e-12):
        raise HormlabError(f"distance field is centred at {list(field.origin)}, not {list(map(float, x))}")
    spatial = field.value_at(np.asarray(ys, dtype=float))
    return np.maximum(spatial, np.sqrt(np.abs(np.asarray(ss, dtype=float) - float(t))))


# ── Harnesses ─────────────────────────────────────────────────────────────────

def _check_grid(u: SpaceTimeGridFunction, cyl: CylinderSet) -> None:
    if cyl.Q.shape != u.values.shape or not np.allclose(cyl.times, u.times):
        raise DimensionError("the cylinder masks do not match the space-time grid of u")


def _nonnegative(u: SpaceTimeGridFunction, mask: np.ndarray) -> np.ndarray:
    """u on ``mask`` with rounding-level negatives (above −1e-9 max|u|) set to zero."""
    values = u.values[mask]
    floor = -1e-9 * float(np.abs(values).max(initial=0.0))
    if values.size and values.min() < floor:
        raise HormlabError(f"u takes the negative value {values.min():.6g} inside Q")
    return np.maximum(values, 0.0)


def harnack_quotient(u: SpaceTimeGridFunction, cyl: CylinderSet, k: float = 0.0, theta: float = 1.0) -> float:
    """max_{Q⁻} u / min_{Q⁺} (u + ρ^θ k)."""
    _check_grid(u, cyl)
    if k < 0:
        raise HormlabError(f"k must be nonnegative, got {k}")
    _nonnegative(u, cyl.Q)
    early = _nonnegative(u, cyl.Qminus)
    late = _nonnegative(u, cyl.Qplus)
    if early.size == 0 or late.size == 0:
        raise DegenerateRatioError("empty Q⁺ or Q⁻ mask")
    denominator = float(late.min()) + cyl.rho ** theta * k
    if denominator <= 0:
        raise DegenerateRatioError("u vanishes somewhere on Q⁺ and k = 0")
    return float(early.max()) / denominator


def parabolic_boundary_max(u: SpaceTimeGridFunction) -> float:
    """max of u over the initial slice and the spatial boundary of every slice."""
    boundary = u.lattice.boundary_mask()
    side = u.values[:, boundary].max() if boundary.any() else -np.inf
    return float(max(u.values[0].max(), side))


def max_principle_margin(u: SpaceTimeGridFunction, M: float, kappa: float = 0.0, C_cap: float = 1.0) -> float:
    """max over interior nodes of u − (M + C_cap·κ) for t > 0; nonpositive means the bound holds."""
    interior = ~u.lattice.boundary_mask()
    later = u.values[1:]
    if not interior.any():
        return -math.inf
    return float(later[:, interior].max() - (M + C_cap * kappa))


def _log_ubar(u: SpaceTimeGridFunction, mask: np.ndarray, k: float, offset: float) -> np.ndarray:
    ubar = u.values[mask] + k + offset
    if ubar.size == 0:
        raise DegenerateRatioError("empty cylinder mask")
    if ubar.min() <= 0:
        raise HormlabError(f"u + k + offset is not positive (min {ubar.min():.6g})")
    return np.log(ubar)


def log_oscillation(
    u: SpaceTimeGridFunction,
    plus: np.ndarray,
    minus: np.ndarray,
    k: float = 0.0,
    offset: float = DEFAULT_OFFSET,
    budget: int = DEFAULT_PAIR_BUDGET,
    seed: int = 0,
) -> float:
    """Mean over (x, t) ∈ Q⁺ and (y, s) ∈ Q⁻ of √((log ū(y, s) − log ū(x, t))⁺), ū = u + k + offset.

    Exact double summation up to ``budget`` node pairs, seeded pair sampling beyond it.
    """
    late = _log_ubar(u, plus, k, offset)
    early = _log_ubar(u, minus, k, offset)
    pairs = late.size * early.size
    if pairs <= budget:
        total = 0.0
        block = max(1, budget // max(early.size, 1) // 4)
        for start in range(0, late.size, block):
            diff = early[None, :] - late[start:start + block, None]
            total += float(np.sqrt(np.maximum(diff, 0.0)).sum())
        return total / pairs
    rng = np.random.default_rng(seed)
    i = rng.integers(0, late.size, size=budget)
    j = rng.integers(0, early.size, size=budget)
    return float(np.sqrt(np.maximum(early[j] - late[i], 0.0)).mean())


def bmo_condition(u: SpaceTimeGridFunction, cyl: CylinderSet, k: float = 0.0, offset: float = DEFAULT_OFFSET,
                  level: Optional[float] = None) -> dict:
    """The two one-sided averages of v = log ū about a level C (default: the mean of v over Q).

    upper = mean over Q⁺ of √((v − C)⁺), lower = mean over Q⁻ of √((C − v)⁺).
    """
    _check_grid(u, cyl)
    C = float(_log_ubar(u, cyl.Q, k, offset).mean()) if level is None else float(level)
    upper = np.sqrt(np.maximum(_log_ubar(u, cyl.Qplus, k, offset) - C, 0.0)).mean()
    lower = np.sqrt(np.maximum(C - _log_ubar(u, cyl.Qminus, k, offset), 0.0)).mean()
    return {"level": C, "upper": float(upper), "lower": float(lower), "A": float(max(upper, lower))}


# ── One (ε, ρ) run ────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class RowSettings:
    """Everything a single (ε, ρ) run needs besides the frame."""

    x: tuple[float, ...]
    initial: str
    resolution: int = 4
    move_budget: int = DEFAULT_MOVE_BUDGET
    delay: float = 0.0
    n_samples: int = 100_000
    ensemble_size: int = 16
    seed: int = 0
    k: float = 0.0
    theta: Optional[float] = None
    C_cap: float = 1.0
    offset: float = DEFAULT_OFFSET
    pair_budget: int = DEFAULT_PAIR_BUDGET
    mode: str = "implicit"
    stencil: str = "directional"
    tau: Optional[float] = None
    linear_solver_tol: float = 1e-10
    max_iters: int = 500

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))
        if self.resolution < 2:
            raise HormlabError(f"resolution must be >= 2, got {self.resolution}")
        if self.delay < 0:
            raise HormlabError(f"delay must be nonnegative, got {self.delay}")


def _zero(points: np.ndarray, t: float) -> np.ndarray:
    return np.zeros(points.shape[:-1])


def _regime(epsilon: float, rho: float) -> str:
    return "eps<r" if epsilon < rho else "r<=eps"


def harnack_row(table: CommutatorTable, epsilon: float, rho: float, settings: RowSettings) -> dict:
    """Distance field, doubling, Poincaré, heat solve and cylinder diagnostics at one (ε, ρ).

    The lattice is fitted to B_ε(x, 3ρ) with base step ρ / resolution; the heat
    problem carries zero Dirichlet data on it and runs to tbar = delay + 9ρ².
    """
    family = rescale(table, epsilon)
    x = np.asarray(settings.x, dtype=float)
    if x.shape != (table.dim,):
        raise DimensionError(f"x must have {table.dim} coordinates")
    h = rho / settings.resolution
    lattice = fit_ball_lattice(family, x, 3 * rho, 3 * settings.resolution, settings.move_budget)
    dist = distance_field(family, x, h=h, move_budget=settings.move_budget, lattice=lattice)

    doubling = doubling_ratio(family, x, rho, settings.n_samples, settings.seed, field=dist)
    poincare = poincare_constant_estimate(family, x, rho, settings.ensemble_size, settings.seed, field=dist)

    initial = data_expression(settings.initial, table.dim, table.variables)
    tbar = settings.delay + 9 * rho ** 2
    problem = ParabolicProblem(
        family=family,
        lattice=lattice,
        T=tbar,
        initial=GridFunction(lattice, initial(lattice.mesh(), 0.0)),
        boundary=_zero,
        step=h,
    )
    scheme = SchemeConfig(mode=settings.mode, tau=settings.tau, stencil=settings.stencil,
                          linear_solver_tol=settings.linear_solver_tol, max_iters=settings.max_iters)
    u, stats = solve(problem, scheme, return_stats=True)

    theta = settings.theta
    if theta is None:
        s = problem.structure
        theta = compute_theta(s.p, s.q, s.alpha, s.beta, s.N)
    cyl = make_cylinders(dist, x, tbar, rho, u)
    M = parabolic_boundary_max(u)
    return {
        "epsilon": float(epsilon),
        "rho": float(rho),
        "regime": _regime(epsilon, rho),
        "nodes": lattice.size,
        "steps": stats.steps,
        "tau": stats.tau,
        "harnack_quotient": harnack_quotient(u, cyl, settings.k, theta),
        "doubling_ratio": doubling["ratio"],
        "poincare_estimate": poincare,
        "max_principle_margin": max_principle_margin(u, M, 0.0, settings.C_cap),
        "log_oscillation": log_oscillation(u, cyl.Qplus, cyl.Qminus, settings.k, settings.offset,
                                           settings.pair_budget, settings.seed),
        "M": M,
        "error": None,
    }


# ── Sweep ─────────────────────────────────────────────────────────────────────

COLUMNS = (
    "epsilon", "rho", "regime", "nodes", "steps", "tau", "harnack_quotient", "doubling_ratio",
    "poincare_estimate", "max_principle_margin", "log_oscillation", "M", "error",
)
MEASURED = ("harnack_quotient", "doubling_ratio", "poincare_estimate", "max_principle_margin", "log_oscillation")


@dataclass(frozen=True)
class Factors:
    harnack: float = 2.0
    poincare: float = 2.0
    doubling: float = 1.25
    margin_tol: float = 1e-9


def _spread(values: Sequence[Optional[float]]) -> float:
    if not values or any(v is None or not np.isfinite(v) for v in values):
        return math.inf
    low, high = min(values), max(values)
    return high / low if low > 0 else math.inf


@dataclass
class SweepReport:
    rows: list[dict]
    factors: Factors
    spreads: list[dict] = field(default_factory=list)
    flags: dict[str, bool] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.flags) and all(self.flags.values())

    def evaluate(self) -> "SweepReport":
        """Fill per-ρ spreads and the pass flags; cross-ρ behaviour is reported, never gated."""
        f = self.factors
        self.spreads = []
        for rho in sorted({row["rho"] for row in self.rows}):
            group = [row for row in self.rows if row["rho"] == rho]
            regimes = {}
            for name in sorted({row["regime"] for row in group}):
                regimes[name] = _spread([row.get("doubling_ratio") for row in group if row["regime"] == name])
            margins = [row.get("max_principle_margin") for row in group]
            self.spreads.append({
                "rho": rho,
                "harnack_spread": _spread([row.get("harnack_quotient") for row in group]),
                "poincare_spread": _spread([row.get("poincare_estimate") for row in group]),
                "doubling_spread": regimes,
                "max_margin": max((m for m in margins if m is not None), default=math.inf),
                "errors": sum(row.get("error") is not None for row in group),
            })
        self.flags = {
            "complete": all(row.get("error") is None for row in self.rows),
            "harnack": all(s["harnack_spread"] <= f.harnack for s in self.spreads),
            "poincare": all(s["poincare_spread"] <= f.poincare for s in self.spreads),
            "doubling": all(v <= f.doubling for s in self.spreads for v in s["doubling_spread"].values()),
            "max_principle": all(s["max_margin"] <= f.margin_tol for s in self.spreads),
        }
        return self

    def table(self) -> pd.DataFrame:
        frame = pd.DataFrame([{c: row.get(c) for c in COLUMNS} for row in self.rows], columns=list(COLUMNS))
        return frame.sort_values(["rho", "epsilon"], kind="mergesort").reset_index(drop=True)

    def plot_data(self) -> dict[str, pd.DataFrame]:
        """One ε × ρ table per measured quantity, for offline plotting."""
        frame = self.table()
        return {
            name: frame.pivot(index="epsilon", columns="rho", values=name).sort_index()
            for name in MEASURED
        }

    def summary(self) -> dict:
        return {
            "type": "sweep",
            "rows": len(self.rows),
            "factors": asdict(self.factors),
            "spreads": self.spreads,
            "flags": self.flags,
            "pass": self.passed,
        }


def _sweep_task(task: dict) -> dict:
    """Worker entry: rebuild the frame from its payload and run one row, recording any failure."""
    epsilon, rho = task["epsilon"], task["rho"]
    try:
        table = frame_from_spec(task["frame"])
        return harnack_row(table, epsilon, rho, task["settings"])
    except Exception as exc:  # a failed row is recorded and the sweep moves on
        logger.warning("sweep row eps=%g rho=%g failed: %s", epsilon, rho, exc)
        return {"epsilon": float(epsilon), "rho": float(rho), "regime": _regime(epsilon, rho),
                "error": f"{type(exc).__name__}: {exc}"}


def epsilon_sweep(
    table: CommutatorTable,
    epsilons: Sequence[float],
    rhos: Sequence[float],
    settings: RowSettings,
    factors: Factors = Factors(),
    workers: Optional[int] = None,
) -> SweepReport:
    """Run every (ε, ρ) row and gate ε-uniformity at each fixed ρ.

    Rows are independent and may run in worker processes; the report lists them
    in (ρ, ε) order whatever the completion order.
    """
    if not epsilons or not rhos:
        raise HormlabError("the sweep needs at least one epsilon and one rho")
    if any(e < 0 for e in epsilons) or any(r <= 0 for r in rhos):
        raise HormlabError("epsilons must be >= 0 and rhos > 0")
    payload = frame_spec(table)
    tasks = [{"epsilon": float(e), "rho": float(r), "frame": payload, "settings": settings}
             for r in rhos for e in epsilons]
    workers = workers or os.cpu_count() or 1
    logger.info("sweep: %d rows on %d worker(s)", len(tasks), workers)

    results: list[Optional[dict]] = [None] * len(tasks)
    with logging_redirect_tqdm():
        if workers == 1 or len(tasks) == 1:
            for i, task in enumerate(tqdm(tasks, desc="sweep", disable=None)):
                results[i] = _sweep_task(task)
        else:
            with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
                futures = {pool.submit(_sweep_task, task): i for i, task in enumerate(tasks)}
                for future in tqdm(as_completed(futures), total=len(futures), desc="sweep", disable=None):
                    results[futures[future]] = future.result()
    for row in results:
        logger.info("row eps=%g rho=%g: %s", row["epsilon"], row["rho"],
                    row["error"] or f"harnack {row['harnack_quotient']:.4g}")
    return SweepReport(rows=list(results), factors=factors).evaluate()


# ── Entry points ──────────────────────────────────────────────────────────────

def run_harnack(table: CommutatorTable, epsilon: float, rho: float, settings: RowSettings) -> dict:
    row = harnack_row(table, epsilon, rho, settings)
    return {"type": "harnack", "settings": asdict(settings), **row}

