import numpy as np
import pytest

from hormlab.analysis.frames import rescale
from hormlab.analysis.lattice import Box, Lattice
from hormlab.analysis.metric import (
    DistanceField,
    ball_inclusion_check,
    ball_volume,
    distance_field,
    doubling_ratio,
    exp_jacobian,
    exp_map,
    fit_ball_lattice,
    graded_spacing,
    injectivity_check,
    jacobian_bound_check,
    lipschitz_constant,
    nsw_sandwich_check,
    run_distance,
    run_volume,
)
from hormlab.errors import DomainError, HormlabError, ResolutionError


# ── Exponential map ───────────────────────────────────────────────────────────

def test_exp_map_heisenberg_closed_form(heis):
    fam = rescale(heis, 0.5)
    x = np.array([1.0, 2.0, 0.0])
    # straight horizontal lines: z picks up (x0 b - y0 a) / 2 plus the vertical coefficient
    np.testing.assert_allclose(exp_map(fam, x, (0, 1, 3), [0.2], [0.1, 0.2, 0.3]), [1.1, 2.2, 0.4], atol=1e-9)


def test_exp_map_is_batched(heis):
    fam = rescale(heis, 0.25)
    u = np.array([[0.1, 0.0, 0.0], [0.0, 0.1, 0.0]])
    out = exp_map(fam, np.zeros(3), (0, 1, 2), [0.0], u)
    assert out.shape == (2, 3)
    np.testing.assert_allclose(out[1], [0.0, 0.1, 0.0], atol=1e-12)


def test_exp_map_rejects_bad_shapes(heis):
    fam = rescale(heis, 0.25)
    with pytest.raises(HormlabError):
        exp_map(fam, np.zeros(3), (0, 1, 2), [0.0], [0.1, 0.2])
    with pytest.raises(HormlabError):
        exp_map(fam, np.zeros(3), (0, 1, 2), [0.0, 1.0], [0.1, 0.2, 0.3])


def test_exp_jacobian_matches_lambda(heis):
    fam = rescale(heis, 0.5)
    x = np.array([1.0, 2.0, 0.0])
    assert exp_jacobian(fam, x, (0, 1, 3), [0.2], [0.1, 0.2, 0.3]) == pytest.approx(1.0, rel=1e-6)
    assert exp_jacobian(fam, x, (0, 1, 2), [0.2], [0.1, 0.2, 0.3]) == pytest.approx(0.5, rel=1e-6)


def test_jacobian_bound_heisenberg(heis):
    report = jacobian_bound_check(rescale(heis, 0.25), np.zeros(3), 0.1, samples=50)
    assert report["pass"]
    assert report["ratio_min"] == pytest.approx(1.0, abs=1e-5)
    assert report["ratio_max"] == pytest.approx(1.0, abs=1e-5)


def test_jacobian_bound_radius_check(heis):
    with pytest.raises(DomainError):
        jacobian_bound_check(rescale(heis, 0.25), np.zeros(3), 0.2, samples=5, R=0.1)
    with pytest.raises(HormlabError):
        jacobian_bound_check(rescale(heis, 0.25), np.zeros(3), 0.1, C1=1.5, samples=5)


def test_injectivity_heisenberg(heis):
    report = injectivity_check(rescale(heis, 0.25), np.zeros(3), 0.1, samples=200)
    assert report["collisions"] == 0
    assert report["pass"]


# ── Lattice distance ──────────────────────────────────────────────────────────

def test_graded_spacing(heis):
    np.testing.assert_allclose(graded_spacing(rescale(heis, 0.0), np.zeros(3), 0.1), [0.1, 0.1, 0.005])
    np.testing.assert_allclose(graded_spacing(rescale(heis, 0.5), np.zeros(3), 0.1), [0.1, 0.1, 0.05])


def test_euclidean_distance_close_to_norm(plane):
    fam = rescale(plane, 0.0)
    field = distance_field(fam, [0.0, 0.0], Box((-1.0, -1.0), (1.0, 1.0)), h=0.1)
    assert field.lattice.shape == (21, 21)
    assert field.reachable_fraction == 1.0
    pts = field.lattice.mesh()
    norm = np.linalg.norm(pts, axis=-1)
    assert np.all(field.values >= norm - 1e-12)
    assert np.all(field.values <= 1.05 * norm + 1e-12)
    assert field.value_at(np.array([0.5, 0.0])) == pytest.approx(0.5, abs=1e-12)


def test_euclidean_lipschitz(plane):
    fam = rescale(plane, 0.0)
    field = distance_field(fam, [0.0, 0.0], Box((-1.0, -1.0), (1.0, 1.0)), h=0.1)
    assert 1.0 - 1e-9 <= lipschitz_constant(fam, field) <= 1.5


def test_heisenberg_distance_horizontal_and_vertical(heis):
    fam = rescale(heis, 0.0)
    field = distance_field(fam, [0.0, 0.0, 0.0], Box((-0.3, -0.3, -0.05), (0.3, 0.3, 0.05)), h=0.05)
    np.testing.assert_allclose(field.lattice.spacing, [0.05, 0.05, 0.00125])
    assert field.value_at(np.array([0.2, 0.0, 0.0])) == pytest.approx(0.2, abs=1e-12)
    assert field.value_at(np.array([0.0, -0.15, 0.0])) == pytest.approx(0.15, abs=1e-12)
    # a loop enclosing area z is at least sqrt(4 pi z) long; the square of side 0.2 costs 0.8
    vertical = field.value_at(np.array([0.0, 0.0, 0.04]))
    assert np.sqrt(4 * np.pi * 0.04) <= vertical <= 0.8 + 1e-9


def test_distance_origin_outside_box(plane):
    with pytest.raises(DomainError):
        distance_field(rescale(plane, 0.0), [2.0, 0.0], Box((-1.0, -1.0), (1.0, 1.0)), h=0.1)


def test_distance_parameter_checks(plane):
    fam = rescale(plane, 0.0)
    box = Box((-1.0, -1.0), (1.0, 1.0))
    with pytest.raises(HormlabError):
        distance_field(fam, [0.0, 0.0], box, h=0.0)
    with pytest.raises(HormlabError):
        distance_field(fam, [0.0, 0.0], box, h=0.1, move_budget=0)
    with pytest.raises(HormlabError):
        distance_field(fam, [0.0, 0.0], h=0.1)


def test_unrealizable_lattice_is_a_resolution_error(heis):
    fam = rescale(heis, 0.0)
    lattice = Lattice.centered([0.0, 0.0, 0.0], [0.05, 0.05, 0.0007], [3, 3, 3])
    with pytest.raises(ResolutionError):
        distance_field(fam, [0.0, 0.0, 0.0], h=0.05, lattice=lattice)


def test_run_distance_probes(plane):
    field, report = run_distance(plane, [0.0, 0.0], 0.0, Box((-1.0, -1.0), (1.0, 1.0)), 0.1,
                                 probes=[[0.3, 0.0]])
    assert report["shape"] == [21, 21]
    assert report["probes"][0]["distance"] == pytest.approx(0.3, abs=1e-12)
    assert report["max_distance"] >= np.sqrt(2.0) - 1e-12


def _shared_lattice(family, h):
    return Lattice.centered([0.0, 0.0, 0.0], graded_spacing(family, [0.0, 0.0, 0.0], h), [4, 4, 4])


def test_lattice_distance_is_symmetric_and_satisfies_the_triangle_inequality(heis):
    fam = rescale(heis, 0.5)
    lattice = _shared_lattice(fam, 0.05)
    mesh = lattice.mesh()
    a, b = mesh[2, 3, 4], mesh[6, 5, 2]
    from_a = distance_field(fam, a, h=0.05, lattice=lattice)
    from_b = distance_field(fam, b, h=0.05, lattice=lattice)
    d_ab = from_a.values[tuple(lattice.nearest_index(b))]
    d_ba = from_b.values[tuple(lattice.nearest_index(a))]
    assert d_ab == pytest.approx(d_ba, rel=1e-12)
    assert np.all(from_a.values <= d_ab + from_b.values + 1e-12)
    assert np.all(from_b.values <= d_ab + from_a.values + 1e-12)


def test_rescaled_distance_below_the_horizontal_one(heis):
    h = 0.05
    horizontal = distance_field(rescale(heis, 0.0), [0.0, 0.0, 0.0],
                                Box((-0.3, -0.3, -0.05), (0.3, 0.3, 0.05)), h=h)
    for eps in (0.25, 1.0):
        rescaled = distance_field(rescale(heis, eps), [0.0, 0.0, 0.0], h=h, lattice=horizontal.lattice)
        reached = np.isfinite(horizontal.values)
        assert np.all(rescaled.values[reached] <= horizontal.values[reached] + 2 * h)


def test_fit_ball_lattice_encloses_ball(plane):
    fam = rescale(plane, 0.0)
    lattice = fit_ball_lattice(fam, [0.0, 0.0], 0.1, resolution=8)
    field = distance_field(fam, [0.0, 0.0], h=0.1 / 8, lattice=lattice)
    assert field.boundary_min() > 0.1
    assert lattice.spacing == pytest.approx((0.0125, 0.0125))


# ── Volumes ───────────────────────────────────────────────────────────────────

def test_euclidean_disc_area(plane):
    vol = ball_volume(rescale(plane, 0.0), [0.0, 0.0], 0.1, n_samples=20_000)
    assert vol.mean == pytest.approx(np.pi * 0.01, rel=0.08)
    assert 0 < vol.half_width < 0.1 * vol.mean


def test_ball_volume_uses_the_closed_ball(line):
    lattice = Lattice((-1.0,), (0.5,), (5,))
    field = DistanceField((0.0,), 0.0, lattice, np.abs(lattice.mesh()[..., 0]), 3, 0.5)
    assert field.ball_mask(0.5).sum() == 3
    assert field.in_ball(np.array([[0.5], [-0.5], [0.75]]), 0.5).tolist() == [True, True, False]
    vol = ball_volume(rescale(line, 0.0), [0.0], 0.5, field=field, n_samples=20_000)
    assert vol.mean == pytest.approx(1.0, rel=0.05)


def test_volume_is_seeded(plane):
    fam = rescale(plane, 0.0)
    a = ball_volume(fam, [0.0, 0.0], 0.1, n_samples=2_000, seed=3, resolution=6)
    b = ball_volume(fam, [0.0, 0.0], 0.1, n_samples=2_000, seed=3, resolution=6)
    assert a == b


def test_volume_rejects_escaping_ball(plane):
    fam = rescale(plane, 0.0)
    field = distance_field(fam, [0.0, 0.0], Box((-0.2, -0.2), (0.2, 0.2)), h=0.05)
    with pytest.raises(DomainError):
        ball_volume(fam, [0.0, 0.0], 0.3, field=field)


def test_run_volume_ratio(plane):
    report = run_volume(plane, [0.0, 0.0], 0.0, 0.1, n_samples=10_000, resolution=8)
    assert report["lambda"] == pytest.approx(0.01)
    assert report["ratio"] == pytest.approx(np.pi, rel=0.15)


def test_euclidean_doubling(plane):
    report = doubling_ratio(rescale(plane, 0.0), [0.0, 0.0], 0.1, n_samples=10_000, resolution=8)
    assert report["ratio"] == pytest.approx(4.0, rel=0.02)
    assert report["ratio_low"] <= report["ratio"] <= report["ratio_high"]
    assert report["C_D"] == pytest.approx(1.0 / report["ratio"])


@pytest.mark.slow
def test_heisenberg_doubling(heis):
    report = doubling_ratio(rescale(heis, 0.0), [0.0, 0.0, 0.0], 0.1, n_samples=20_000, resolution=8)
    assert report["ratio"] == pytest.approx(16.0, rel=0.02)


def test_sandwich_euclidean(plane):
    report = nsw_sandwich_check(plane, [0.0, 0.0], [0.05, 0.1], [0.0, 0.5], n_samples=5_000, resolution=8)
    assert len(report["rows"]) == 4
    assert set(report["regime_spread"]) == {"eps<r", "r<=eps"}
    for row in report["rows"]:
        assert row["ratio"] == pytest.approx(np.pi, rel=0.15)
    assert report["pass"]


def test_sandwich_radius_bound(plane):
    with pytest.raises(DomainError):
        nsw_sandwich_check(plane, [0.0, 0.0], [0.05, 0.2], [0.0], R=0.1)


def test_inner_inclusion_euclidean(plane):
    report = ball_inclusion_check(rescale(plane, 0.0), [0.0, 0.0], 0.1, samples=200)
    assert report["inner_failures"] == 0
    # with C1 / C2 = 1/2 the outer box has half-width r / 2 and misses most of the disc
    assert report["outer_failures"] > 0
    assert not report["pass"]


def test_ball_inclusions_euclidean_with_a_wide_outer_box(plane):
    # C1 / C2 = 6/5 makes the outer box cover the disc while the inner box still fits inside it
    report = ball_inclusion_check(rescale(plane, 0.0), [0.0, 0.0], 0.1, C1=0.6, C2=0.5, samples=300)
    assert report["inner_failures"] == 0
    assert report["outer_failures"] == 0
    assert report["outer_samples"] > 0
    assert report["pass"]


@pytest.mark.slow
@pytest.mark.parametrize("eps", [0.0, 0.5])
def test_inner_inclusion_heisenberg(heis, eps):
    report = ball_inclusion_check(rescale(heis, eps), [0.0, 0.0, 0.0], 0.1, C1=0.02, samples=300)
    assert report["inner_failures"] == 0
    assert report["inner_max_distance"] <= 0.1 + report["h"]
    assert report["index"] == ([0, 1, 3] if eps == 0.0 else [0, 1, 2])
