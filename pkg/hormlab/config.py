"""Pydantic models for frame files, problem files and experiment configs, plus documented defaults."""
from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .analysis.frames import DEFAULT_C2, DEFAULT_EPSILON_BAR, CommutatorTable, frame_from_spec, load_frame, named_frame
from .analysis.harnack import DEFAULT_OFFSET, DEFAULT_PAIR_BUDGET, Factors, RowSettings
from .analysis.lattice import Box
from .analysis.metric import DEFAULT_C1, DEFAULT_CONFIDENCE, DEFAULT_MOVE_BUDGET, DEFAULT_RESOLUTION
from .analysis.pde import DEFAULT_CFL_SAFETY, DEFAULT_LINEAR_TOL, DEFAULT_MAX_ITERS
from .errors import HormlabError

OUTPUT_ROOT_ENV = "HORMLAB_OUTPUT_ROOT"

DEFAULTS = {
    "epsilon_bar": DEFAULT_EPSILON_BAR,
    "C2": DEFAULT_C2,
    "offset": DEFAULT_OFFSET,
    "confidence": DEFAULT_CONFIDENCE,
    "move_budget": DEFAULT_MOVE_BUDGET,
    "resolution": DEFAULT_RESOLUTION,
    "cfl_safety": DEFAULT_CFL_SAFETY,
    "linear_solver_tol": DEFAULT_LINEAR_TOL,
    "max_iters": DEFAULT_MAX_ITERS,
    "workers": os.cpu_count() or 1,
    "output_root": "runs",
    "port": 8100,
}


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULTS["output_root"]))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ── Frames and boxes ──────────────────────────────────────────────────────────

class FrameSpec(_Strict):
    dim: int = Field(gt=0)
    generators: list[list[str]]
    step: int = Field(default=2, ge=1)
    variables: Optional[list[str]] = None

    def build(self) -> CommutatorTable:
        return frame_from_spec(self.model_dump())


class BoxSpec(_Strict):
    lower: list[float]
    upper: list[float]

    def build(self) -> Box:
        return Box(tuple(self.lower), tuple(self.upper))


# ── Problem files ─────────────────────────────────────────────────────────────

class FluxModel(_Strict):
    kind: Literal["identity", "matrix", "model"] = "identity"
    matrix: Optional[list[list[str]]] = None
    amplitude: float = 0.5


class SourceModel(_Strict):
    c: str = "0"
    d: str = "0"
    g: str = "0"


def _infinite(value):
    if isinstance(value, str) and value.strip().lower() in ("inf", "infinity", "+inf"):
        return math.inf
    return value


class StructureModel(_Strict):
    a: float = 1.0
    abar: float = 1.0
    norm_b: float = 0.0
    norm_c: float = 0.0
    norm_d: float = 0.0
    norm_e: float = 0.0
    norm_f: float = 0.0
    norm_g: float = 0.0
    norm_h: float = 0.0
    p: float = math.inf
    q: float = math.inf
    alpha: float = math.inf
    beta: float = math.inf
    N: float = 4.0
    theta: Optional[float] = None

    @field_validator("p", "q", "alpha", "beta", mode="before")
    @classmethod
    def _allow_inf(cls, value):
        return _infinite(value)


class SchemeModel(_Strict):
    mode: Literal["explicit", "implicit"] = "implicit"
    tau: Union[Literal["auto"], float] = "auto"
    cfl_safety: float = Field(default=DEFAULT_CFL_SAFETY, gt=0, le=1)
    linear_solver_tol: float = Field(default=DEFAULT_LINEAR_TOL, gt=0)
    max_iters: int = Field(default=DEFAULT_MAX_ITERS, ge=1)
    stencil: Literal["nested", "directional"] = "nested"
    keep_every: int = Field(default=1, ge=1)


class ProblemSpec(_Strict):
    epsilon: float = Field(default=0.0, ge=0)
    box: BoxSpec
    grid: list[int]
    T: float = Field(gt=0)
    initial: str
    boundary: Optional[str] = None
    exact: Optional[str] = None
    error_threshold: Optional[float] = None
    flux: FluxModel = FluxModel()
    source: SourceModel = SourceModel()
    structure: Optional[StructureModel] = None
    scheme: SchemeModel = SchemeModel()

    @model_validator(mode="after")
    def _shapes(self) -> "ProblemSpec":
        if not (len(self.box.lower) == len(self.box.upper) == len(self.grid)):
            raise ValueError("box bounds and grid must have one entry per coordinate")
        if any(n < 3 for n in self.grid):
            raise ValueError("grid needs at least three nodes per axis")
        return self


# ── Command parameter blocks ──────────────────────────────────────────────────

class InspectParams(_Strict):
    x: Optional[list[float]] = None
    epsilon: float = Field(default=0.0, ge=0)
    r: float = Field(default=0.1, gt=0)
    C2: float = Field(default=DEFAULT_C2, gt=0, lt=1)


class DistanceParams(_Strict):
    epsilon: float = Field(default=0.0, ge=0)
    origin: list[float]
    box: BoxSpec
    h: float = Field(gt=0)
    move_budget: int = Field(default=DEFAULT_MOVE_BUDGET, ge=1)
    probes: Optional[list[list[float]]] = None


class VolumeParams(_Strict):
    epsilon: float = Field(default=0.0, ge=0)
    x: list[float]
    r: float = Field(gt=0)
    n_samples: int = Field(default=100_000, ge=1)
    resolution: int = Field(default=DEFAULT_RESOLUTION, ge=2)
    move_budget: int = Field(default=DEFAULT_MOVE_BUDGET, ge=1)


class JacobianParams(_Strict):
    epsilon: float = Field(default=0.0, ge=0)
    x: list[float]
    r: float = Field(gt=0)
    C1: float = Field(default=DEFAULT_C1, gt=0, lt=1)
    C2: float = Field(default=DEFAULT_C2, gt=0, lt=1)
    samples: int = Field(default=1000, ge=1)
    R: Optional[float] = Field(default=None, gt=0)


class SandwichParams(_Strict):
    x: list[float]
    r_list: list[float] = Field(min_length=1)
    eps_list: list[float] = Field(min_length=1)
    n_samples: int = Field(default=100_000, ge=1)
    resolution: int = Field(default=DEFAULT_RESOLUTION, ge=2)
    move_budget: int = Field(default=DEFAULT_MOVE_BUDGET, ge=1)
    spread_factor: float = Field(default=32.0, ge=1)
    regime_factor: float = Field(default=8.0, ge=1)
    R: Optional[float] = Field(default=None, gt=0)

    @field_validator("r_list")
    @classmethod
    def _positive(cls, values: list[float]) -> list[float]:
        if any(v <= 0 for v in values):
            raise ValueError("radii must be positive")
        return values

    @field_validator("eps_list")
    @classmethod
    def _nonnegative(cls, values: list[float]) -> list[float]:
        if any(v < 0 for v in values):
            raise ValueError("epsilons must be nonnegative")
        return values


class PoincareParams(_Strict):
    epsilon: float = Field(default=0.0, ge=0)
    x0: list[float]
    r: float = Field(gt=0)
    ensemble_size: int = Field(default=16, ge=1)
    resolution: int = Field(default=DEFAULT_RESOLUTION, ge=2)
    move_budget: int = Field(default=DEFAULT_MOVE_BUDGET, ge=1)


class RowParams(_Strict):
    """Settings shared by a single Harnack run and every sweep row."""

    x: list[float]
    initial: str
    resolution: int = Field(default=4, ge=2)
    move_budget: int = Field(default=DEFAULT_MOVE_BUDGET, ge=1)
    delay: float = Field(default=0.0, ge=0)
    n_samples: int = Field(default=100_000, ge=1)
    ensemble_size: int = Field(default=16, ge=1)
    k: float = Field(default=0.0, ge=0)
    theta: Optional[float] = None
    C_cap: float = Field(default=1.0, ge=0)
    offset: float = Field(default=DEFAULT_OFFSET, ge=0)
    pair_budget: int = Field(default=DEFAULT_PAIR_BUDGET, ge=1)
    scheme: SchemeModel = SchemeModel(stencil="directional")

    def settings(self, seed: int) -> RowSettings:
        s = self.scheme
        return RowSettings(
            x=tuple(self.x),
            initial=self.initial,
            resolution=self.resolution,
            move_budget=self.move_budget,
            delay=self.delay,
            n_samples=self.n_samples,
            ensemble_size=self.ensemble_size,
            seed=seed,
            k=self.k,
            theta=self.theta,
            C_cap=self.C_cap,
            offset=self.offset,
            pair_budget=self.pair_budget,
            mode=s.mode,
            stencil=s.stencil,
            tau=None if s.tau == "auto" else float(s.tau),
            linear_solver_tol=s.linear_solver_tol,
            max_iters=s.max_iters,
        )


class HarnackParams(RowParams):
    epsilon: float = Field(default=0.0, ge=0)
    rho: float = Field(gt=0)


class FactorsModel(_Strict):
    harnack: float = Field(default=2.0, ge=1)
    poincare: float = Field(default=2.0, ge=1)
    doubling: float = Field(default=1.25, ge=1)
    margin_tol: float = Field(default=1e-9, ge=0)

    def build(self) -> Factors:
        return Factors(**self.model_dump())


class SweepConfig(RowParams):
    epsilons: list[float] = Field(min_length=1)
    rhos: list[float] = Field(min_length=1)
    factors: FactorsModel = FactorsModel()

    @field_validator("epsilons")
    @classmethod
    def _nonnegative(cls, values: list[float]) -> list[float]:
        if any(v < 0 for v in values):
            raise ValueError("epsilons must be nonnegative")
        return values

    @field_validator("rhos")
    @classmethod
    def _positive(cls, values: list[float]) -> list[float]:
        if any(v <= 0 for v in values):
            raise ValueError("rhos must be positive")
        return values


# ── Experiment config ─────────────────────────────────────────────────────────

class ExperimentConfig(_Strict):
    """A frame (file path or inline), an output directory, a seed and one block per command."""

    frame: Union[str, FrameSpec]
    output: Optional[str] = None
    seed: int = 0
    workers: Optional[int] = Field(default=None, ge=1)
    inspect: Optional[InspectParams] = None
    distance: Optional[DistanceParams] = None
    volume: Optional[VolumeParams] = None
    doubling: Optional[VolumeParams] = None
    jacobian: Optional[JacobianParams] = None
    sandwich: Optional[SandwichParams] = None
    poincare: Optional[PoincareParams] = None
    solve: Optional[ProblemSpec] = None
    harnack: Optional[HarnackParams] = None
    sweep: Optional[SweepConfig] = None

    def table(self, base: Optional[Path] = None) -> CommutatorTable:
        if isinstance(self.frame, FrameSpec):
            return self.frame.build()
        path = Path(self.frame)
        if not path.is_absolute() and base is not None:
            path = base / path
        if path.exists():
            return load_frame(path)
        if path.suffix == "":
            return named_frame(self.frame)
        raise HormlabError(f"frame file {path} does not exist")

    def output_dir(self, command: str) -> Path:
        if self.output:
            out = Path(self.output)
            return out if out.is_absolute() else output_root() / out
        return output_root() / command


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except OSError as exc:
        raise HormlabError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise HormlabError(f"config {path} is not valid JSON: {exc}") from exc
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as exc:
        raise HormlabError(f"invalid config {path}: {exc}") from exc
