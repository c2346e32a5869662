import math

import numpy as np
import pytest

from hormlab.analysis import functional
from hormlab.analysis.frames import rescale
from hormlab.analysis.lattice import Box, GridFunction, Lattice, SpaceTimeGridFunction
from hormlab.analysis.metric import distance_field
from hormlab.errors import DegenerateRatioError, DomainError, HormlabError, StructureError, SupportError


def _plane_field(plane, h=0.05):
    return distance_field(rescale(plane, 0.0), [0.0, 0.0], Box((-1.0, -1.0), (1.0, 1.0)), h=h)


# ── Norms and averages ────────────────────────────────────────────────────────

def test_lpq_norm_of_constant():
    lat = Lattice.cell_centered(Box((0.0, 0.0), (2.0, 1.0)), [4, 4])
    u = SpaceTimeGridFunction(lat, np.full((5, 4, 4), 3.0), tau=0.5)
    assert functional.lpq_norm(u, 2, 2) == pytest.approx(3.0 * math.sqrt(2.0) * math.sqrt(2.0))
    assert functional.lpq_norm(u, math.inf, math.inf) == pytest.approx(3.0)
    with pytest.raises(HormlabError):
        functional.lpq_norm(u, 0.5, 2)


def test_lpq_norm_on_spanning_lattice():
    lat = Lattice.spanning(Box((0.0, 0.0), (1.0, 1.0)), [11, 11])
    ones = SpaceTimeGridFunction(lat, np.ones((11, 11, 11)), tau=0.1)
    assert functional.lpq_norm(ones, 2, 2) == pytest.approx(1.0)
    assert functional.lpq_norm(ones, 1, 1) == pytest.approx(1.0)

    times = 0.01 * np.arange(101)
    linear = SpaceTimeGridFunction(lat, np.broadcast_to(times[:, None, None], (101, 11, 11)).copy(), tau=0.01)
    assert functional.lpq_norm(linear, 2, 2) == pytest.approx(1.0 / math.sqrt(3.0), rel=1e-4)
    assert functional.lpq_norm(linear, math.inf, 2) == pytest.approx(1.0 / math.sqrt(3.0), rel=1e-4)
    assert functional.lpq_norm(linear, math.inf, 1) == pytest.approx(0.5)


def test_steklov_of_linear_in_time():
    lat = Lattice((0.0,), (1.0,), (3,))
    times = 0.1 * np.arange(11)
    u = SpaceTimeGridFunction(lat, np.repeat(times[:, None], 3, axis=1), tau=0.1)
    avg = functional.steklov(u, 0.3)
    assert avg.n_slices == 8
    np.testing.assert_allclose(avg.values[:, 0], times[:8] + 0.15)


def test_steklov_requires_multiple_of_tau():
    lat = Lattice((0.0,), (1.0,), (3,))
    u = SpaceTimeGridFunction(lat, np.zeros((5, 3)), tau=0.1)
    with pytest.raises(HormlabError):
        functional.steklov(u, 0.15)
    with pytest.raises(HormlabError):
        functional.steklov(u, 0.4)


# ── Structure conditions ──────────────────────────────────────────────────────

def test_theta_for_bounded_coefficients():
    assert functional.compute_theta(math.inf, math.inf, math.inf, math.inf, 4.0) == 1.0


def test_theta_for_finite_exponents():
    # N/2p + 1/q = 3/8 binds: 1 - θ >= 3/4
    assert functional.compute_theta(8.0, 8.0, math.inf, math.inf, 4.0) == pytest.approx(0.25)


def test_theta_nonpositive_is_a_structure_error():
    with pytest.raises(StructureError):
        functional.compute_theta(4.0, 2.0, math.inf, math.inf, 4.0)


def test_validate_structure_lists_every_violation():
    params = functional.StructureParams(a=2.0, abar=1.0, norm_b=-1.0, p=2.0)
    report = functional.validate_structure(params)
    assert not report["valid"]
    assert len(report["violations"]) >= 3
    with pytest.raises(StructureError):
        functional.validate_structure(params, strict=True)


def test_validate_structure_constants():
    params = functional.StructureParams(norm_b=1.0, norm_d=2.0, norm_f=0.5, norm_g=0.25, norm_h=0.125)
    report = functional.validate_structure(params, M=2.0)
    assert report["valid"]
    assert report["kappa"] == pytest.approx(3.0 * 2.0 + 0.75)
    assert report["k"] == pytest.approx(0.875)
    assert report["theta"] == 1.0
    assert report["params"]["p"] == "inf"


def test_theta_above_admissible():
    params = functional.StructureParams(p=8.0, q=8.0, theta=0.9)
    assert not functional.validate_structure(params)["valid"]


# ── Cutoffs and ratios ────────────────────────────────────────────────────────

def test_cutoff_profile(plane):
    field = _plane_field(plane)
    phi = functional.cutoff(field, [0.0, 0.0], 0.2)
    assert phi.values.max() == 1.0
    inner = field.values <= 0.2
    outer = field.values >= 0.4
    assert np.all(phi.values[inner] == 1.0)
    assert np.all(phi.values[outer] == 0.0)


def test_cutoff_checks(plane):
    field = _plane_field(plane)
    with pytest.raises(DomainError):
        functional.cutoff(field, [0.0, 0.0], 0.6)
    with pytest.raises(HormlabError):
        functional.cutoff(field, [0.1, 0.0], 0.2)


def test_horizontal_gradient_heisenberg(heis):
    fam = rescale(heis, 0.5)
    lat = Lattice.spanning(Box((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)), [5, 5, 5])
    u = GridFunction.from_callable(lat, lambda p: p[..., 2])
    grad = functional.horizontal_gradient(fam, u)
    mesh = lat.mesh()
    np.testing.assert_allclose(grad[..., 0], -0.5 * mesh[..., 1], atol=1e-12)
    np.testing.assert_allclose(grad[..., 1], 0.5 * mesh[..., 0], atol=1e-12)
    full = functional.horizontal_gradient(fam, u, frame=True)
    np.testing.assert_allclose(full[..., 2], 0.5, atol=1e-12)


def test_poincare_ratio_linear_function(plane):
    field = _plane_field(plane, h=0.025)
    u = GridFunction.from_callable(field.lattice, lambda p: p[..., 0])
    ratio = functional.poincare_ratio(rescale(plane, 0.0), u, field, [0.0, 0.0], 0.3)
    # ∫_B x² / (r² |B_2r|) for discs is 1/16
    assert ratio == pytest.approx(1.0 / 16.0, rel=0.1)


def test_poincare_ratio_constant_is_degenerate(plane):
    field = _plane_field(plane)
    u = GridFunction(field.lattice, np.ones(field.lattice.shape))
    with pytest.raises(DegenerateRatioError):
        functional.poincare_ratio(rescale(plane, 0.0), u, field, [0.0, 0.0], 0.2)


def test_weighted_poincare(plane):
    field = _plane_field(plane)
    u = GridFunction.from_callable(field.lattice, lambda p: p[..., 0] + p[..., 1] ** 2)
    out = functional.weighted_poincare_ratio(rescale(plane, 0.0), u, field, [0.0, 0.0], 0.4, N=2.0)
    assert out["ratio"] > 0
    assert out["weight_mass_power"] == pytest.approx(out["weight_mass"])


def test_ensemble_is_seeded():
    lat = Lattice.spanning(Box((-1.0, -1.0), (1.0, 1.0)), [9, 9])
    a = functional.test_function_ensemble(lat, 4, seed=7)
    b = functional.test_function_ensemble(lat, 4, seed=7)
    c = functional.test_function_ensemble(lat, 4, seed=8)
    assert len(a) == 4
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))
    assert not np.array_equal(a[0].values, c[0].values)
    with pytest.raises(HormlabError):
        functional.test_function_ensemble(lat, 0)


def test_poincare_estimate_bounds_each_member(plane):
    fam = rescale(plane, 0.0)
    field = _plane_field(plane)
    members = functional.test_function_ensemble(field.lattice, 6, seed=1, center=[0.0, 0.0], scale=[0.4, 0.4])
    estimate = functional.poincare_constant_estimate(fam, [0.0, 0.0], 0.2, field=field, ensemble=members)
    ratios = [functional.poincare_ratio(fam, m, field, [0.0, 0.0], 0.2) for m in members]
    assert estimate == pytest.approx(max(ratios))


def test_run_poincare(plane):
    report = functional.run_poincare(plane, [0.0, 0.0], 0.0, 0.1, ensemble_size=4, resolution=6)
    assert report["type"] == "poincare"
    assert len(report["ratios"]) == 4
    assert report["estimate"] > 0


def test_sobolev_ratio(plane):
    lat = Lattice.spanning(Box((0.0, 0.0), (1.0, 1.0)), [21, 21])
    u = GridFunction.from_callable(lat, lambda p: np.sin(np.pi * p[..., 0]) * np.sin(np.pi * p[..., 1]))
    fam = rescale(plane, 0.0)
    ratio = functional.sobolev_ratio(fam, u, 1.0, 2.5)
    assert ratio > 0
    assert functional.sobolev_ratio(fam, u.with_values(2 * u.values), 1.0, 2.5) == pytest.approx(ratio)
    with pytest.raises(SupportError):
        functional.sobolev_ratio(fam, u.with_values(u.values + 1.0), 1.0, 2.5)
    with pytest.raises(HormlabError):
        functional.sobolev_ratio(fam, u, 3.0, 2.5)


def _bump(widths):
    def fn(p):
        return np.prod([np.sin(np.pi * p[..., k] / w) for k, w in enumerate(widths)], axis=0)
    return fn


@pytest.mark.parametrize("lam", [0.5, 3.0])
def test_sobolev_ratio_is_dilation_invariant(plane, heis, lam):
    for table, weights, N, p in [(plane, (1, 1), 2.0, 1.0), (heis, (1, 1, 2), 4.0, 1.5)]:
        fam = rescale(table, 0.0)
        ratios = []
        for s in (1.0, lam):
            widths = tuple(s ** w for w in weights)
            lat = Lattice.spanning(Box((0.0,) * len(widths), widths), [9] * len(widths))
            ratios.append(functional.sobolev_ratio(fam, GridFunction.from_callable(lat, _bump(widths)), p, N))
        assert ratios[1] == pytest.approx(ratios[0], rel=1e-9)
