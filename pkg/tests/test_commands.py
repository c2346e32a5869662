import json
from pathlib import Path

import pandas as pd
import pytest

from hormlab.commands import EXIT_FAIL, EXIT_PASS, EXIT_USAGE, build_parser, main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
WAVE = "exp(-9.8696044*t)*sin(3.14159265*x)"


def _manifest(directory: Path) -> dict:
    return json.loads((directory / "manifest.json").read_text())


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_frame_inspect(output_root, capsys):
    assert main(["frame", "--frame", "heisenberg", "--seed", "3"]) == EXIT_PASS
    printed = json.loads(capsys.readouterr().out)
    assert printed["dim"] == 3
    assert (output_root / "frame" / "report.json").exists()
    assert _manifest(output_root / "frame")["seed"] == 3


def test_frame_rank(output_root, capsys):
    assert main(["frame", "rank", "--frame", "grushin", "--x", "0,0"]) == EXIT_PASS
    assert capsys.readouterr().out.strip() == "2"
    assert _manifest(output_root / "frame")["pass"] is True


def test_distance_writes_field(output_root):
    argv = ["distance", "--frame", "euclidean2", "--x", "0,0", "--h", "0.1",
            "--box-lower", "-0.5,-0.5", "--box-upper", "0.5,0.5", "--output", "plane"]
    assert main(argv) == EXIT_PASS
    out = output_root / "plane"
    frame = pd.read_csv(out / "distance.csv")
    assert list(frame.columns) == ["x", "y", "distance"]
    assert len(frame) == 121
    assert set(_manifest(out)["outputs"]) == {"report.json", "distance.csv", "distance.npz"}


def test_reruns_write_identical_csv(output_root):
    base = ["volume", "--frame", "euclidean2", "--x", "0,0", "--r", "0.1", "--n-samples", "2000",
            "--resolution", "6", "--seed", "5"]
    for name in ("first", "second"):
        assert main(base + ["--output", name]) == EXIT_PASS
    first, second = output_root / "first", output_root / "second"
    assert (first / "volume.csv").read_bytes() == (second / "volume.csv").read_bytes()
    assert _manifest(first)["outputs"]["volume.csv"] == _manifest(second)["outputs"]["volume.csv"]


def test_distance_needs_both_box_corners(output_root, capsys):
    argv = ["distance", "--frame", "euclidean2", "--x", "0,0", "--h", "0.1", "--box-lower", "-0.5,-0.5"]
    assert main(argv) == EXIT_USAGE
    assert "[error]" in capsys.readouterr().err


def test_solve_manufactured_config(output_root, capsys):
    assert main(["solve", "--config", str(CONFIGS / "solve_manufactured.json")]) == EXIT_PASS
    summary = json.loads(capsys.readouterr().out)
    assert summary["pass"] is True
    assert summary["final_error"] < 1e-8
    out = output_root / "solve"
    assert (out / "solution.npz").exists()
    final = pd.read_csv(out / "final.csv")
    assert final["value"].iloc[-1] == pytest.approx(1.2)


def test_solve_problem_file_fails_threshold(output_root, tmp_path):
    problem = {
        "box": {"lower": [0.0], "upper": [1.0]},
        "grid": [11],
        "T": 0.05,
        "initial": WAVE,
        "boundary": WAVE,
        "exact": WAVE,
        "error_threshold": 1e-8,
        "scheme": {"mode": "implicit", "tau": 0.01},
    }
    path = tmp_path / "problem.json"
    path.write_text(json.dumps(problem))
    assert main(["solve", "--frame", "euclidean1", "--problem", str(path)]) == EXIT_FAIL
    assert _manifest(output_root / "solve")["pass"] is False


def test_harnack_config(output_root, tmp_path):
    config = {
        "frame": "euclidean2",
        "harnack": {"x": [0.0, 0.0], "initial": "exp(-(x^2 + y^2)/0.02)", "rho": 0.1, "resolution": 2,
                    "n_samples": 2000, "ensemble_size": 4},
    }
    path = tmp_path / "harnack.json"
    path.write_text(json.dumps(config))
    assert main(["harnack", "--config", str(path)]) == EXIT_PASS
    report = json.loads((output_root / "harnack" / "report.json").read_text())
    assert report["max_principle_margin"] <= 0


def test_jacobian_command(output_root):
    argv = ["jacobian", "--frame", "heisenberg", "--x", "0,0,0", "--r", "0.1", "--samples", "200", "--output", "jac"]
    assert main(argv) == EXIT_PASS
    out = output_root / "jac"
    report = json.loads((out / "report.json").read_text())
    assert report["index"] == [0, 1, 3]
    assert 0.25 <= report["ratio_min"] <= report["ratio_max"] <= 4.0
    assert report["injectivity"]["collisions"] == 0
    row = pd.read_csv(out / "jacobian.csv")
    assert len(row) == 1
    assert _manifest(out)["pass"] is True


def test_sandwich_command(output_root):
    argv = ["sandwich", "--frame", "euclidean2", "--x", "0,0", "--r-list", "0.05,0.1", "--eps-list", "0,0.5",
            "--n-samples", "5000", "--resolution", "8"]
    assert main(argv) == EXIT_PASS
    rows = pd.read_csv(output_root / "sandwich" / "sandwich.csv")
    assert list(rows.columns) == ["epsilon", "r", "volume", "ci", "lambda", "ratio", "regime"]
    assert len(rows) == 4
    assert rows["ratio"].between(0.85 * 3.14159, 1.15 * 3.14159).all()


def test_sandwich_radius_bound_from_config(output_root, tmp_path):
    path = tmp_path / "sandwich.json"
    path.write_text(json.dumps({
        "frame": "euclidean2",
        "sandwich": {"x": [0.0, 0.0], "r_list": [0.05, 0.2], "eps_list": [0.0], "R": 0.1},
    }))
    assert main(["sandwich", "--config", str(path)]) == EXIT_USAGE


@pytest.mark.parametrize(
    "argv",
    [
        ["distance"],
        ["distance", "--frame", "heisenberg"],
        ["frame", "--frame", "nonesuch"],
        ["volume", "--config", "/nonexistent/config.json"],
    ],
)
def test_usage_errors(output_root, argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert capsys.readouterr().err.startswith("[error]")


@pytest.mark.slow
def test_sweep_euclidean_config(output_root):
    assert main(["sweep", "--config", str(CONFIGS / "sweep_euclidean.json")]) == EXIT_PASS
    out = output_root / "sweep"
    table = pd.read_csv(out / "sweep.csv")
    assert table["epsilon"].tolist() == [0.0, 0.25, 0.5]
    assert table["error"].isna().all()
    assert (out / "plot_harnack_quotient.csv").exists()
    assert _manifest(out)["pass"] is True


@pytest.mark.slow
def test_sweep_heisenberg_config(output_root):
    argv = ["sweep", "--config", str(CONFIGS / "sweep_heisenberg.json"),
            "--epsilons", "0,0.0625,0.25", "--rhos", "0.1", "--workers", "1"]
    assert main(argv) in (EXIT_PASS, EXIT_FAIL)
    table = pd.read_csv(output_root / "sweep" / "sweep.csv")
    assert table["epsilon"].tolist() == [0.0, 0.0625, 0.25]
    assert table["error"].isna().all()
    quotient = table["harnack_quotient"]
    assert quotient.between(1.0, 100.0).all()
    # the Harnack bound and the log-oscillation estimate hold uniformly in epsilon
    assert quotient.max() <= 4.0 * quotient.min()
    assert table["log_oscillation"].between(0.0, 3.0).all()
    assert (table["max_principle_margin"] <= 1e-9).all()
