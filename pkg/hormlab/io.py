"""CSV / binary layouts for lattice data and the per-run manifest."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import platform
import sys
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Iterable, Optional, Union

import numpy as np
import pandas as pd

from .analysis.lattice import GridFunction, Lattice, SpaceTimeGridFunction
from .analysis.metric import DistanceField
from .errors import HormlabError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
PACKAGES = ("hormlab", "numpy", "scipy", "sympy", "pandas", "statsmodels", "pydantic", "fastapi", "tqdm")

PathLike = Union[str, Path]


def json_safe(value: Any) -> Any:
    """Plain JSON types with non-finite floats spelled "inf" / "-inf" / "nan"."""
    if isinstance(value, dict):
        return {str(k): json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return json_safe(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return value


def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(json_safe(payload), indent=2, sort_keys=True) + "\n")
    return path


def write_csv(frame: pd.DataFrame, path: PathLike, index: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


# ── Lattice data ──────────────────────────────────────────────────────────────

def _coordinate_frame(lattice: Lattice, names: Iterable[str]) -> pd.DataFrame:
    pts = lattice.points()
    return pd.DataFrame({name: pts[:, j] for j, name in enumerate(names)})


def grid_function_frame(u: GridFunction, names: Iterable[str]) -> pd.DataFrame:
    frame = _coordinate_frame(u.lattice, names)
    frame["value"] = u.values.ravel()
    return frame


def distance_frame(field: DistanceField, names: Iterable[str]) -> pd.DataFrame:
    frame = _coordinate_frame(field.lattice, names)
    frame["distance"] = field.values.ravel()
    return frame


def space_time_frame(u: SpaceTimeGridFunction, names: Iterable[str], every: int = 1) -> pd.DataFrame:
    """Long layout: one row per (slice, node) for every ``every``-th slice and the last one."""
    keep = sorted(set(range(0, u.n_slices, every)) | {u.n_slices - 1})
    base = _coordinate_frame(u.lattice, names)
    parts = []
    for k in keep:
        part = base.copy()
        part.insert(0, "t", u.times[k])
        part["value"] = u.values[k].ravel()
        parts.append(part)
    return pd.concat(parts, ignore_index=True)


def _lattice_arrays(lattice: Lattice) -> dict:
    return {
        "lower": np.asarray(lattice.lower),
        "spacing": np.asarray(lattice.spacing),
        "shape": np.asarray(lattice.shape),
        "periodic": np.asarray(lattice.periodic),
        "midpoint": np.asarray(lattice.midpoint),
    }


def _lattice_from(data) -> Lattice:
    midpoint = bool(data["midpoint"]) if "midpoint" in data.files else False
    return Lattice(tuple(data["lower"]), tuple(data["spacing"]), tuple(int(n) for n in data["shape"]),
                   bool(data["periodic"]), midpoint)


def save_distance_field(path: PathLike, field: DistanceField) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, origin=np.asarray(field.origin), epsilon=field.epsilon, values=field.values,
                 move_budget=field.move_budget, h=field.h, **_lattice_arrays(field.lattice))
    return path


def load_distance_field(path: PathLike) -> DistanceField:
    try:
        with np.load(Path(path)) as data:
            return DistanceField(
                origin=tuple(float(v) for v in data["origin"]),
                epsilon=float(data["epsilon"]),
                lattice=_lattice_from(data),
                values=np.array(data["values"]),
                move_budget=int(data["move_budget"]),
                h=float(data["h"]),
            )
    except (OSError, KeyError, ValueError) as exc:
        raise HormlabError(f"cannot load distance field {path}: {exc}") from exc


def save_space_time(path: PathLike, u: SpaceTimeGridFunction) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, values=u.values, tau=u.tau, t0=u.t0, **_lattice_arrays(u.lattice))
    return path


def load_space_time(path: PathLike) -> SpaceTimeGridFunction:
    try:
        with np.load(Path(path)) as data:
            return SpaceTimeGridFunction(_lattice_from(data), np.array(data["values"]),
                                         float(data["tau"]), float(data["t0"]))
    except (OSError, KeyError, ValueError) as exc:
        raise HormlabError(f"cannot load space-time data {path}: {exc}") from exc


# ── Manifest ──────────────────────────────────────────────────────────────────

def sha256_file(path: PathLike) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def package_versions() -> dict[str, Optional[str]]:
    versions = {}
    for name in PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def write_manifest(
    out_dir: PathLike,
    command: str,
    config: Any,
    seed: Optional[int],
    wall_time: float,
    outputs: Iterable[PathLike] = (),
    extra: Optional[dict] = None,
) -> Path:
    """manifest.json: config echo, versions, seed, wall time and the sha256 of every output file."""
    out_dir = Path(out_dir)
    files = {}
    for p in outputs:
        p = Path(p)
        if p.exists():
            files[p.name] = sha256_file(p)
    payload = {
        "command": command,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "argv": list(sys.argv),
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "versions": package_versions(),
        "seed": seed,
        "wall_time": wall_time,
        "config": config,
        "outputs": files,
        **(extra or {}),
    }
    path = write_json(out_dir / "manifest.json", payload)
    logger.info("manifest written to %s", path)
    return path
