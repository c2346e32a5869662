import math

import numpy as np
import pytest

from hormlab.analysis.frames import rescale
from hormlab.analysis.harnack import (
    COLUMNS,
    REGIONS,
    Factors,
    RowSettings,
    SweepReport,
    bmo_condition,
    epsilon_sweep,
    harnack_quotient,
    harnack_row,
    log_oscillation,
    make_cylinders,
    max_principle_margin,
    parabolic_boundary_max,
    parabolic_distance,
    run_harnack,
)
from hormlab.analysis.lattice import Box, SpaceTimeGridFunction
from hormlab.analysis.metric import distance_field
from hormlab.errors import DegenerateRatioError, DomainError, HormlabError, ResolutionError

TIMES = 0.0025 * np.arange(37)  # 0 .. 0.09 = 9 rho² for rho = 0.1
BUMP = "exp(-(x^2 + y^2)/0.02)"


@pytest.fixture(scope="module")
def field(plane):
    return distance_field(rescale(plane, 0.0), [0.0, 0.0], Box((-1.0, -1.0), (1.0, 1.0)), h=0.05)


@pytest.fixture(scope="module")
def cyl(field):
    return make_cylinders(field, [0.0, 0.0], 0.09, 0.1, TIMES)


def _space_time(field, fn):
    values = np.stack([np.broadcast_to(fn(t), field.lattice.shape) for t in TIMES]).astype(float)
    return SpaceTimeGridFunction(field.lattice, values, 0.0025)


# ── Cylinders ─────────────────────────────────────────────────────────────────

def test_cylinder_nesting(cyl):
    assert not np.any(cyl.Qplus & ~cyl.Q)
    assert not np.any(cyl.Qminus & ~cyl.Q)
    assert not np.any(cyl.Dplus & ~cyl.Qplus)
    assert not np.any(cyl.Dminus & ~cyl.Qminus)
    assert not np.any(cyl.Qplus & cyl.Qminus)
    assert set(cyl.counts()) == set(REGIONS)


def test_cylinder_windows(cyl, field):
    # Q⁺ covers t in [0.08, 0.09] and Q⁻ covers [0.01, 0.02], both closed
    plus_slices = np.flatnonzero(cyl.Qplus.any(axis=(1, 2)))
    minus_slices = np.flatnonzero(cyl.Qminus.any(axis=(1, 2)))
    assert plus_slices.tolist() == list(range(32, 37))
    assert minus_slices.tolist() == list(range(4, 9))
    assert cyl.counts()["Q"] == 37 * int(np.count_nonzero(field.values <= 0.3))


def test_cylinders_grow_with_rho(field):
    small = make_cylinders(field, [0.0, 0.0], 0.09, 0.08, TIMES)
    large = make_cylinders(field, [0.0, 0.0], 0.09, 0.1, TIMES)
    for name in ("Q", "Qplus"):
        assert not np.any(small.mask(name) & ~large.mask(name))


def test_cylinder_errors(field):
    with pytest.raises(DomainError):
        make_cylinders(field, [0.0, 0.0], 0.05, 0.1, TIMES)
    with pytest.raises(DomainError):
        make_cylinders(field, [0.0, 0.0], 0.09, 0.1, TIMES, R=0.004)
    with pytest.raises(DomainError):
        make_cylinders(field, [0.0, 0.0], 0.09, 0.4, 0.01 * np.arange(200))
    with pytest.raises(HormlabError):
        make_cylinders(field, [0.1, 0.0], 0.09, 0.1, TIMES)
    with pytest.raises(ResolutionError):
        make_cylinders(field, [0.0, 0.0], 0.09, 0.1, [0.0, 0.09])
    with pytest.raises(HormlabError):
        make_cylinders(field, [0.0, 0.0], 0.09, 0.1, TIMES).mask("Qzero")


def test_parabolic_distance(field):
    d = parabolic_distance(field, ((0.0, 0.0), 0.05), (np.array([[0.3, 0.0], [0.1, 0.0]]), np.array([0.21, 0.05])))
    np.testing.assert_allclose(d, [0.4, 0.1], atol=1e-9)


# ── Quotients and margins ─────────────────────────────────────────────────────

def test_harnack_quotient_constant(field, cyl):
    u = _space_time(field, lambda t: 1.0)
    assert harnack_quotient(u, cyl) == pytest.approx(1.0)
    assert harnack_quotient(u, cyl, k=1.0, theta=1.0) == pytest.approx(1.0 / 1.1)


def test_harnack_quotient_early_mass(field, cyl):
    u = _space_time(field, lambda t: 3.0 if t <= 0.02 + 1e-12 else 1.0)
    assert harnack_quotient(u, cyl) == pytest.approx(3.0)


def test_harnack_quotient_errors(field, cyl):
    with pytest.raises(HormlabError):
        harnack_quotient(_space_time(field, lambda t: -1.0), cyl)
    with pytest.raises(DegenerateRatioError):
        harnack_quotient(_space_time(field, lambda t: 0.0 if t > 0.05 else 1.0), cyl)
    with pytest.raises(HormlabError):
        harnack_quotient(_space_time(field, lambda t: 1.0), cyl, k=-1.0)


def test_max_principle_margin(field):
    lattice = field.lattice
    values = np.zeros((len(TIMES),) + lattice.shape)
    values[0] = 2.0
    values[1:, ~lattice.boundary_mask()] = 1.5
    u = SpaceTimeGridFunction(lattice, values, 0.0025)
    M = parabolic_boundary_max(u)
    assert M == 2.0
    assert max_principle_margin(u, M) == pytest.approx(-0.5)
    assert max_principle_margin(u, 1.0, kappa=0.25, C_cap=2.0) == pytest.approx(0.0)


def test_log_oscillation(field, cyl):
    flat = _space_time(field, lambda t: 1.0)
    assert log_oscillation(flat, cyl.Qplus, cyl.Qminus) == pytest.approx(0.0)
    jump = _space_time(field, lambda t: math.exp(4.0) if t <= 0.02 + 1e-12 else 1.0)
    exact = log_oscillation(jump, cyl.Qplus, cyl.Qminus)
    sampled = log_oscillation(jump, cyl.Qplus, cyl.Qminus, budget=1000, seed=3)
    assert exact == pytest.approx(2.0, rel=1e-9)
    assert sampled == pytest.approx(2.0, rel=1e-9)


@pytest.mark.parametrize("c", [1e-3, 7.5])
def test_quotient_and_log_oscillation_are_scale_invariant(field, cyl, c):
    mesh = field.lattice.mesh()
    u = _space_time(field, lambda t: 0.1 + np.exp(-(mesh[..., 0] ** 2 + mesh[..., 1] ** 2) / 0.02 - 10.0 * t))
    scaled = SpaceTimeGridFunction(u.lattice, c * u.values, u.tau)
    assert harnack_quotient(scaled, cyl) == pytest.approx(harnack_quotient(u, cyl), rel=1e-12)
    base = log_oscillation(u, cyl.Qplus, cyl.Qminus, offset=0.0)
    assert base > 0
    assert log_oscillation(scaled, cyl.Qplus, cyl.Qminus, offset=0.0) == pytest.approx(base, rel=1e-6)
    assert bmo_condition(scaled, cyl, offset=0.0)["A"] == pytest.approx(bmo_condition(u, cyl, offset=0.0)["A"], rel=1e-6)


def test_log_oscillation_requires_positive_shift(field, cyl):
    u = _space_time(field, lambda t: -1.0)
    with pytest.raises(HormlabError):
        log_oscillation(u, cyl.Qplus, cyl.Qminus)


def test_bmo_condition(field, cyl):
    flat = bmo_condition(_space_time(field, lambda t: 2.0), cyl)
    assert flat["A"] == pytest.approx(0.0, abs=1e-12)
    assert flat["level"] == pytest.approx(math.log(2.0))
    jump = bmo_condition(_space_time(field, lambda t: math.exp(4.0) if t <= 0.02 + 1e-12 else 1.0), cyl, level=0.0)
    assert jump["upper"] < 1e-5
    assert jump["lower"] == 0.0


# ── One row and the sweep ─────────────────────────────────────────────────────

def _settings(**overrides):
    base = dict(x=(0.0, 0.0), initial=BUMP, resolution=2, n_samples=2_000, ensemble_size=4, seed=0)
    base.update(overrides)
    return RowSettings(**base)


def test_settings_validation():
    with pytest.raises(HormlabError):
        _settings(resolution=1)
    with pytest.raises(HormlabError):
        _settings(delay=-1.0)


def test_harnack_row_euclidean(plane):
    row = harnack_row(plane, 0.0, 0.1, _settings())
    assert row["error"] is None
    assert set(row) == set(COLUMNS)
    assert row["regime"] == "eps<r"
    assert 1.0 <= row["harnack_quotient"] < math.inf
    assert 2.0 < row["doubling_ratio"] < 8.0
    assert row["poincare_estimate"] > 0
    assert row["max_principle_margin"] <= 1e-9
    assert row["log_oscillation"] >= 0
    assert row["M"] == pytest.approx(1.0)


def test_run_harnack_payload(plane):
    report = run_harnack(plane, 0.0, 0.1, _settings())
    assert report["type"] == "harnack"
    assert report["settings"]["resolution"] == 2


def test_sweep_is_flat_without_brackets(plane):
    report = epsilon_sweep(plane, [0.0, 0.5], [0.1], _settings(), workers=1)
    assert len(report.rows) == 2
    assert report.flags["complete"]
    spread = report.spreads[0]
    assert spread["harnack_spread"] == pytest.approx(1.0)
    assert spread["poincare_spread"] == pytest.approx(1.0)
    assert report.passed
    table = report.table()
    assert list(table.columns) == list(COLUMNS)
    assert table["epsilon"].tolist() == [0.0, 0.5]
    plots = report.plot_data()
    assert plots["harnack_quotient"].shape == (2, 1)
    summary = report.summary()
    assert summary["pass"] is True
    assert summary["factors"]["doubling"] == 1.25


def test_sweep_records_failed_rows(plane):
    report = epsilon_sweep(plane, [0.0, 0.25], [0.1], _settings(x=(0.0, 0.0, 0.0)), workers=1)
    assert all(row["error"].startswith("DimensionError") for row in report.rows)
    assert not report.flags["complete"]
    assert not report.passed
    assert report.table().shape == (2, len(COLUMNS))


def test_sweep_rejects_bad_grid(plane):
    with pytest.raises(HormlabError):
        epsilon_sweep(plane, [], [0.1], _settings())
    with pytest.raises(HormlabError):
        epsilon_sweep(plane, [0.0], [-0.1], _settings())


def test_factors_gate_spreads():
    rows = [
        {"epsilon": 0.0, "rho": 0.1, "regime": "eps<r", "harnack_quotient": 1.0, "doubling_ratio": 16.0,
         "poincare_estimate": 0.1, "max_principle_margin": -0.1, "log_oscillation": 0.2, "error": None},
        {"epsilon": 0.5, "rho": 0.1, "regime": "r<=eps", "harnack_quotient": 3.0, "doubling_ratio": 8.0,
         "poincare_estimate": 0.15, "max_principle_margin": -0.2, "log_oscillation": 0.2, "error": None},
    ]
    report = SweepReport(rows, Factors()).evaluate()
    assert report.flags == {"complete": True, "harnack": False, "poincare": True, "doubling": True,
                            "max_principle": True}
    assert not report.passed


@pytest.mark.slow
def test_heisenberg_row(heis):
    settings = RowSettings(x=(0.0, 0.0, 0.0), initial="exp(-((x^2 + y^2)^2 + 16*z^2)/0.0016)", resolution=3,
                           n_samples=5_000, ensemble_size=4)
    row = harnack_row(heis, 0.0, 0.1, settings)
    assert row["error"] is None
    assert math.isfinite(row["harnack_quotient"])
    assert row["max_principle_margin"] <= 1e-9
