"""Hormlab FastAPI application and console entry point."""
from __future__ import annotations

import sys

from fastapi import FastAPI

from . import __version__
from .routers import frame, functional, harnack, metric, pde

app = FastAPI(
    title="Hormlab",
    version=__version__,
    description="Sub-Riemannian geometry and Harnack-inequality laboratory",
    docs_url="/api/docs",
    redoc_url="/api/redoc",
)

app.include_router(frame.router, prefix="/api/frame", tags=["Frames"])
app.include_router(metric.router, prefix="/api/metric", tags=["Metric"])
app.include_router(functional.router, prefix="/api/functional", tags=["Functional Inequalities"])
app.include_router(pde.router, prefix="/api/pde", tags=["Parabolic Solver"])
app.include_router(harnack.router, prefix="/api/harnack", tags=["Harnack"])


@app.get("/", include_in_schema=False)
async def root() -> dict:
    return {"name": "hormlab", "version": __version__, "docs": "/api/docs"}


def cli() -> None:
    from .commands import main

    sys.exit(main())
