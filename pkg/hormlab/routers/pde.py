"""Parabolic solver API router."""
from __future__ import annotations

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from ..analysis.pde import run_solve
from ..config import ProblemSpec
from ..errors import HormlabError
from ..io import json_safe
from .frame import FrameRef

router = APIRouter()


class SolveRequest(BaseModel):
    frame: FrameRef
    problem: ProblemSpec


@router.post("/solve")
async def solve(req: SolveRequest) -> dict:
    try:
        _, report = run_solve(req.frame.table(), req.problem)
        return json_safe(report)
    except HormlabError as exc:
        raise HTTPException(400, str(exc)) from exc
    except Exception as exc:
        raise HTTPException(500, str(exc)) from exc
