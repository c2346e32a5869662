"""Harnack harness and ε-sweep API router."""
from __future__ import annotations

from typing import Optional

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from ..analysis.harnack import epsilon_sweep, run_harnack
from ..config import HarnackParams, SweepConfig
from ..errors import HormlabError
from ..io import json_safe
from .frame import FrameRef

router = APIRouter()


class HarnackRequest(BaseModel):
    frame: FrameRef
    params: HarnackParams
    seed: int = 0


class SweepRequest(BaseModel):
    frame: FrameRef
    params: SweepConfig
    seed: int = 0
    workers: Optional[int] = 1


@router.post("/run")
async def run(req: HarnackRequest) -> dict:
    p = req.params
    try:
        return json_safe(run_harnack(req.frame.table(), p.epsilon, p.rho, p.settings(req.seed)))
    except HormlabError as exc:
        raise HTTPException(400, str(exc)) from exc
    except Exception as exc:
        raise HTTPException(500, str(exc)) from exc


@router.post("/sweep")
async def sweep(req: SweepRequest) -> dict:
    p = req.params
    try:
        report = epsilon_sweep(req.frame.table(), p.epsilons, p.rhos, p.settings(req.seed), p.factors.build(),
                               req.workers)
    except HormlabError as exc:
        raise HTTPException(400, str(exc)) from exc
    except Exception as exc:
        raise HTTPException(500, str(exc)) from exc
    return json_safe({**report.summary(), "table": report.table().to_dict(orient="records")})
