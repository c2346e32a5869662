"""Frame inspection API router."""
from __future__ import annotations

import json
from typing import Optional

from fastapi import APIRouter, File, Form, HTTPException, UploadFile
from pydantic import BaseModel

from ..analysis.frames import CommutatorTable, DEFAULT_C2, frame_from_spec, named_frame, run_frame_report
from ..config import FrameSpec
from ..errors import HormlabError
from ..io import json_safe

router = APIRouter()


class FrameRef(BaseModel):
    """Either a model frame name (heisenberg, grushin, euclidean<n>) or an inline definition."""

    model: Optional[str] = None
    spec: Optional[FrameSpec] = None

    def table(self) -> CommutatorTable:
        if (self.model is None) == (self.spec is None):
            raise HormlabError("give exactly one of 'model' and 'spec'")
        return named_frame(self.model) if self.model is not None else self.spec.build()


class InspectRequest(BaseModel):
    frame: FrameRef
    x: Optional[list[float]] = None
    epsilon: float = 0.0
    r: float = 0.1
    C2: float = DEFAULT_C2


def _report(table: CommutatorTable, x: Optional[list[float]], epsilon: float, r: float, C2: float) -> dict:
    point = x if x is not None else [0.0] * table.dim
    return json_safe(run_frame_report(table, point, epsilon, r, C2))


@router.post("/inspect")
async def inspect(req: InspectRequest) -> dict:
    if req.r <= 0:
        raise HTTPException(400, "r must be positive.")
    try:
        return _report(req.frame.table(), req.x, req.epsilon, req.r, req.C2)
    except HormlabError as exc:
        raise HTTPException(400, str(exc)) from exc
    except Exception as exc:
        raise HTTPException(500, str(exc)) from exc


@router.post("/upload")
async def upload(file: UploadFile = File(...), epsilon: float = Form(0.0), r: float = Form(0.1)) -> dict:
    """Upload a frame definition file (JSON) and inspect it at the origin."""
    content = await file.read()
    try:
        payload = json.loads(content)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise HTTPException(400, f"Failed to parse frame file: {exc}") from exc
    try:
        return _report(frame_from_spec(payload), None, epsilon, r, DEFAULT_C2)
    except HormlabError as exc:
        raise HTTPException(400, str(exc)) from exc
    except Exception as exc:
        raise HTTPException(500, str(exc)) from exc
