"""Command-line subcommands: config-file-first runs that write CSV/JSON artifacts and a manifest."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from .analysis.frames import hormander_rank, run_frame_report
from .analysis.functional import run_poincare
from .analysis.harnack import epsilon_sweep, run_harnack
from .analysis.metric import nsw_sandwich_check, run_distance, run_doubling, run_jacobian, run_volume
from .analysis.pde import run_solve
from .config import (
    DEFAULTS,
    DistanceParams,
    ExperimentConfig,
    HarnackParams,
    InspectParams,
    JacobianParams,
    PoincareParams,
    ProblemSpec,
    SandwichParams,
    SweepConfig,
    VolumeParams,
    load_config,
)
from .errors import HormlabError
from .io import (
    distance_frame,
    grid_function_frame,
    json_safe,
    save_distance_field,
    save_space_time,
    write_csv,
    write_json,
    write_manifest,
)

logger = logging.getLogger(__name__)

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

BLOCKS: dict[str, type[BaseModel]] = {
    "frame": InspectParams,
    "distance": DistanceParams,
    "volume": VolumeParams,
    "doubling": VolumeParams,
    "jacobian": JacobianParams,
    "sandwich": SandwichParams,
    "poincare": PoincareParams,
    "solve": ProblemSpec,
    "harnack": HarnackParams,
    "sweep": SweepConfig,
}
# config attribute holding each command's block
ATTRIBUTES = {"frame": "inspect"}


# ── Parser ────────────────────────────────────────────────────────────────────

def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hormlab", description="Hörmander-frame geometry and Harnack laboratory.")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", type=Path, help="experiment config (JSON); flags override its values")
        p.add_argument("--frame", help="frame file or model name (heisenberg, grushin, euclidean<n>)")
        p.add_argument("--output", help="output directory (relative paths live under $HORMLAB_OUTPUT_ROOT)")
        p.add_argument("--seed", type=int)
        return p

    p = command("frame", "inspect a frame: commutator table, degrees, λ_I values, Hörmander rank")
    p.add_argument("action", nargs="?", default="inspect", choices=["inspect", "brackets", "rank"])
    p.add_argument("--x", type=_floats)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--r", type=float)

    p = command("distance", "lattice CC distance from a point")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--x", type=_floats, dest="origin")
    p.add_argument("--h", type=float)
    p.add_argument("--box-lower", type=_floats)
    p.add_argument("--box-upper", type=_floats)
    p.add_argument("--move-budget", type=int)

    for name, help in (("volume", "Monte-Carlo ball volume"), ("doubling", "doubling ratio |B(x,2r)|/|B(x,r)|")):
        p = command(name, help)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--x", type=_floats)
        p.add_argument("--r", type=float)
        p.add_argument("--n-samples", type=int)
        p.add_argument("--resolution", type=int)
        p.add_argument("--move-budget", type=int)

    p = command("jacobian", "exponential-map Jacobian window and injectivity on the box Q_ε(C1 r)")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--x", type=_floats)
    p.add_argument("--r", type=float)
    p.add_argument("--C1", type=float, dest="C1")
    p.add_argument("--C2", type=float, dest="C2")
    p.add_argument("--samples", type=int)

    p = command("sandwich", "ball volume against the volume polynomial over an (ε, r) grid")
    p.add_argument("--x", type=_floats)
    p.add_argument("--r-list", type=_floats)
    p.add_argument("--eps-list", type=_floats)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--move-budget", type=int)

    p = command("poincare", "Poincaré constant lower bound over a seeded ensemble")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--x", type=_floats, dest="x0")
    p.add_argument("--r", type=float)
    p.add_argument("--ensemble-size", type=int)
    p.add_argument("--resolution", type=int)

    p = command("solve", "time-step a parabolic problem")
    p.add_argument("--problem", type=Path, help="problem file (JSON) used when the config has no solve block")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--T", type=float)

    p = command("harnack", "Harnack quotient and maximum-principle margin at one (ε, ρ)")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--x", type=_floats)
    p.add_argument("--resolution", type=int)

    p = command("sweep", "ε-stability sweep over an (ε, ρ) grid")
    p.add_argument("--epsilons", type=_floats)
    p.add_argument("--rhos", type=_floats)
    p.add_argument("--resolution", type=int)
    p.add_argument("--workers", type=int)

    sub.add_parser("serve", help="run the HTTP API (port from $PORT)")
    return parser


# ── Config resolution ─────────────────────────────────────────────────────────

_GLOBAL = {"config", "frame", "output", "seed", "command", "log_level", "action", "problem", "workers"}


def _overrides(args: argparse.Namespace) -> dict:
    values = {k: v for k, v in vars(args).items() if k not in _GLOBAL and v is not None}
    lower, upper = values.pop("box_lower", None), values.pop("box_upper", None)
    if lower is not None or upper is not None:
        if lower is None or upper is None:
            raise HormlabError("--box-lower and --box-upper go together")
        values["box"] = {"lower": lower, "upper": upper}
    return values


def resolve(args: argparse.Namespace) -> tuple[ExperimentConfig, Optional[Path], BaseModel]:
    """Experiment config with command-line overrides applied, its directory, and the command's block."""
    if args.config is not None:
        config = load_config(args.config)
        base = args.config.parent
    elif args.frame is not None:
        config = ExperimentConfig(frame=args.frame)
        base = None
    else:
        raise HormlabError("either --config or --frame is required")

    updates = {}
    if args.frame is not None:
        updates["frame"] = args.frame
    if args.output is not None:
        updates["output"] = args.output
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        updates["workers"] = args.workers

    attr = ATTRIBUTES.get(args.command, args.command)
    current = getattr(config, attr)
    if current is None and getattr(args, "problem", None) is not None:
        try:
            current = ProblemSpec.model_validate(json.loads(args.problem.read_text()))
        except (OSError, json.JSONDecodeError, ValidationError) as exc:
            raise HormlabError(f"invalid problem file {args.problem}: {exc}") from exc
    data = current.model_dump() if current is not None else {}
    data.update(_overrides(args))
    try:
        block = BLOCKS[args.command].model_validate(data)
        config = config.model_copy(update={**updates, attr: block})
    except ValidationError as exc:
        raise HormlabError(f"invalid {args.command} parameters: {exc}") from exc
    return config, base, block


# ── Commands ──────────────────────────────────────────────────────────────────

def _finish(config: ExperimentConfig, command: str, out: Path, started: float, outputs: list[Path],
            report: dict, passed: Optional[bool] = None) -> int:
    outputs = [write_json(out / "report.json", report), *outputs]
    write_manifest(out, command, json_safe(config.model_dump()), config.seed, time.perf_counter() - started, outputs,
                   extra={"pass": passed})
    summary = {k: v for k, v in json_safe(report).items() if not isinstance(v, (list, dict))}
    print(json.dumps(summary, indent=2, sort_keys=True))
    if passed is None:
        return EXIT_PASS
    return EXIT_PASS if passed else EXIT_FAIL


def cmd_frame(config: ExperimentConfig, base: Optional[Path], params: InspectParams, args) -> int:
    started = time.perf_counter()
    table = config.table(base)
    x = params.x if params.x is not None else [0.0] * table.dim
    report = run_frame_report(table, x, params.epsilon, params.r, params.C2)
    if args.action == "brackets":
        for entry in report["entries"]:
            print(f"{entry['label']:<16} degree {entry['degree']}  ({', '.join(entry['components'])})")
    elif args.action == "rank":
        print(hormander_rank(table, np.asarray(x, dtype=float)))
    out = config.output_dir("frame")
    passed = report["spans"] if args.action == "rank" else None
    outputs = [write_json(out / "report.json", report)]
    write_manifest(out, "frame", json_safe(config.model_dump()), config.seed, time.perf_counter() - started,
                   outputs, extra={"pass": passed})
    if args.action == "inspect":
        print(json.dumps(json_safe(report), indent=2))
    return EXIT_PASS if passed in (None, True) else EXIT_FAIL


def cmd_distance(config, base, params: DistanceParams, args) -> int:
    started = time.perf_counter()
    table = config.table(base)
    field, report = run_distance(table, params.origin, params.epsilon, params.box.build(), params.h,
                                 params.move_budget, params.probes)
    out = config.output_dir("distance")
    outputs = [
        write_csv(distance_frame(field, table.variables), out / "distance.csv"),
        save_distance_field(out / "distance.npz", field),
    ]
    return _finish(config, "distance", out, started, outputs, report)


def _volume_like(command: str, runner: Callable) -> Callable:
    def handler(config, base, params: VolumeParams, args) -> int:
        started = time.perf_counter()
        report = runner(config.table(base), params.x, params.epsilon, params.r, params.n_samples, config.seed,
                        params.resolution, params.move_budget)
        out = config.output_dir(command)
        flat = pd.json_normalize(json_safe(report), sep="_")
        outputs = [write_csv(flat, out / f"{command}.csv")]
        return _finish(config, command, out, started, outputs, report)

    return handler


cmd_volume = _volume_like("volume", run_volume)
cmd_doubling = _volume_like("doubling", run_doubling)


def cmd_jacobian(config, base, params: JacobianParams, args) -> int:
    started = time.perf_counter()
    report = run_jacobian(config.table(base), params.x, params.epsilon, params.r, params.C1, params.C2,
                          params.samples, config.seed, params.R)
    out = config.output_dir("jacobian")
    flat = pd.json_normalize(json_safe(report), sep="_")
    outputs = [write_csv(flat, out / "jacobian.csv")]
    return _finish(config, "jacobian", out, started, outputs, report, report["pass"])


def cmd_sandwich(config, base, params: SandwichParams, args) -> int:
    started = time.perf_counter()
    report = nsw_sandwich_check(config.table(base), params.x, params.r_list, params.eps_list, params.n_samples,
                                config.seed, params.resolution, params.move_budget, params.spread_factor,
                                params.regime_factor, params.R)
    out = config.output_dir("sandwich")
    outputs = [write_csv(pd.DataFrame(report["rows"]), out / "sandwich.csv")]
    return _finish(config, "sandwich", out, started, outputs, report, report["pass"])


def cmd_poincare(config, base, params: PoincareParams, args) -> int:
    started = time.perf_counter()
    report = run_poincare(config.table(base), params.x0, params.epsilon, params.r, params.ensemble_size,
                          config.seed, params.resolution, params.move_budget)
    out = config.output_dir("poincare")
    ratios = pd.DataFrame({"member": range(len(report["ratios"])), "ratio": report["ratios"]})
    outputs = [write_csv(ratios, out / "ratios.csv")]
    return _finish(config, "poincare", out, started, outputs, report)


def cmd_solve(config, base, params: ProblemSpec, args) -> int:
    started = time.perf_counter()
    table = config.table(base)
    solution, report = run_solve(table, params)
    out = config.output_dir("solve")
    outputs = [
        write_csv(grid_function_frame(solution.slice(solution.n_slices - 1), table.variables), out / "final.csv"),
        save_space_time(out / "solution.npz", solution),
    ]
    return _finish(config, "solve", out, started, outputs, report, report.get("pass"))


def cmd_harnack(config, base, params: HarnackParams, args) -> int:
    started = time.perf_counter()
    report = run_harnack(config.table(base), params.epsilon, params.rho, params.settings(config.seed))
    passed = bool(np.isfinite(report["harnack_quotient"]) and report["max_principle_margin"] <= 0.0)
    out = config.output_dir("harnack")
    return _finish(config, "harnack", out, started, [], report, passed)


def cmd_sweep(config, base, params: SweepConfig, args) -> int:
    started = time.perf_counter()
    workers = config.workers or DEFAULTS["workers"]
    report = epsilon_sweep(config.table(base), params.epsilons, params.rhos, params.settings(config.seed),
                           params.factors.build(), workers)
    out = config.output_dir("sweep")
    outputs = [write_csv(report.table(), out / "sweep.csv")]
    for name, frame in report.plot_data().items():
        outputs.append(write_csv(frame, out / f"plot_{name}.csv", index=True))
    return _finish(config, "sweep", out, started, outputs, report.summary(), report.passed)


HANDLERS = {
    "frame": cmd_frame,
    "distance": cmd_distance,
    "volume": cmd_volume,
    "doubling": cmd_doubling,
    "jacobian": cmd_jacobian,
    "sandwich": cmd_sandwich,
    "poincare": cmd_poincare,
    "solve": cmd_solve,
    "harnack": cmd_harnack,
    "sweep": cmd_sweep,
}


def serve() -> None:
    import os

    import uvicorn

    port = int(os.environ.get("PORT", DEFAULTS["port"]))
    uvicorn.run("hormlab.main:app", host="0.0.0.0", port=port)


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "serve":
        serve()
        return EXIT_PASS
    try:
        config, base, block = resolve(args)
        return HANDLERS[args.command](config, base, block, args)
    except HormlabError as exc:
        print(f"[error] {exc}", file=sys.stderr)
        return EXIT_USAGE
