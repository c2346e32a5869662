"""Poincaré estimates and structure-condition API router."""
from __future__ import annotations

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from ..analysis.functional import StructureParams, compute_theta, run_poincare, run_structure
from ..analysis.metric import DEFAULT_MOVE_BUDGET, DEFAULT_RESOLUTION
from ..config import StructureModel
from ..errors import HormlabError
from ..io import json_safe
from .frame import FrameRef

router = APIRouter()


class PoincareRequest(BaseModel):
    frame: FrameRef
    epsilon: float = 0.0
    x0: list[float]
    r: float
    ensemble_size: int = 16
    seed: int = 0
    resolution: int = DEFAULT_RESOLUTION
    move_budget: int = DEFAULT_MOVE_BUDGET


class StructureRequest(BaseModel):
    structure: StructureModel = StructureModel()
    M: float = 0.0


class ThetaRequest(BaseModel):
    p: float
    q: float
    alpha: float
    beta: float
    N: float


@router.post("/poincare")
async def poincare(req: PoincareRequest) -> dict:
    if req.ensemble_size < 1:
        raise HTTPException(400, "ensemble_size must be positive.")
    try:
        return json_safe(run_poincare(req.frame.table(), req.x0, req.epsilon, req.r, req.ensemble_size, req.seed,
                                      req.resolution, req.move_budget))
    except HormlabError as exc:
        raise HTTPException(400, str(exc)) from exc
    except Exception as exc:
        raise HTTPException(500, str(exc)) from exc


@router.post("/structure")
async def structure(req: StructureRequest) -> dict:
    try:
        return json_safe(run_structure(StructureParams(**req.structure.model_dump()), req.M))
    except HormlabError as exc:
        raise HTTPException(400, str(exc)) from exc


@router.post("/theta")
async def theta(req: ThetaRequest) -> dict:
    try:
        return {"theta": compute_theta(req.p, req.q, req.alpha, req.beta, req.N)}
    except HormlabError as exc:
        raise HTTPException(400, str(exc)) from exc
