"""Distance, volume and doubling API router."""
from __future__ import annotations

from typing import Optional

import numpy as np
from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from ..analysis.frames import DEFAULT_C2, rescale
from ..analysis.metric import (
    DEFAULT_C1,
    DEFAULT_MOVE_BUDGET,
    DEFAULT_RESOLUTION,
    jacobian_bound_check,
    nsw_sandwich_check,
    run_distance,
    run_doubling,
    run_volume,
)
from ..config import BoxSpec
from ..errors import HormlabError
from ..io import json_safe
from .frame import FrameRef

router = APIRouter()


class DistanceRequest(BaseModel):
    frame: FrameRef
    epsilon: float = 0.0
    origin: list[float]
    box: BoxSpec
    h: float
    move_budget: int = DEFAULT_MOVE_BUDGET
    probes: Optional[list[list[float]]] = None


class VolumeRequest(BaseModel):
    frame: FrameRef
    epsilon: float = 0.0
    x: list[float]
    r: float
    n_samples: int = 100_000
    seed: int = 0
    resolution: int = DEFAULT_RESOLUTION
    move_budget: int = DEFAULT_MOVE_BUDGET


class JacobianRequest(BaseModel):
    frame: FrameRef
    epsilon: float = 0.0
    x: list[float]
    r: float
    C1: float = DEFAULT_C1
    C2: float = DEFAULT_C2
    samples: int = 1000
    seed: int = 0


class SandwichRequest(BaseModel):
    frame: FrameRef
    x: list[float]
    r_list: list[float]
    eps_list: list[float]
    n_samples: int = 100_000
    seed: int = 0
    resolution: int = DEFAULT_RESOLUTION
    move_budget: int = DEFAULT_MOVE_BUDGET


def _guard(fn):
    try:
        return json_safe(fn())
    except HormlabError as exc:
        raise HTTPException(400, str(exc)) from exc
    except Exception as exc:
        raise HTTPException(500, str(exc)) from exc


@router.post("/distance")
async def distance(req: DistanceRequest) -> dict:
    if req.h <= 0:
        raise HTTPException(400, "h must be positive.")
    return _guard(lambda: run_distance(req.frame.table(), req.origin, req.epsilon, req.box.build(), req.h,
                                       req.move_budget, req.probes)[1])


@router.post("/volume")
async def volume(req: VolumeRequest) -> dict:
    return _guard(lambda: run_volume(req.frame.table(), req.x, req.epsilon, req.r, req.n_samples, req.seed,
                                     req.resolution, req.move_budget))


@router.post("/doubling")
async def doubling(req: VolumeRequest) -> dict:
    return _guard(lambda: run_doubling(req.frame.table(), req.x, req.epsilon, req.r, req.n_samples, req.seed,
                                       req.resolution, req.move_budget))


@router.post("/jacobian")
async def jacobian(req: JacobianRequest) -> dict:
    return _guard(lambda: jacobian_bound_check(rescale(req.frame.table(), req.epsilon), np.asarray(req.x),
                                               req.r, req.C1, req.C2, req.samples, req.seed))


@router.post("/sandwich")
async def sandwich(req: SandwichRequest) -> dict:
    return _guard(lambda: nsw_sandwich_check(req.frame.table(), req.x, req.r_list, req.eps_list, req.n_samples,
                                             req.seed, req.resolution, req.move_budget))
