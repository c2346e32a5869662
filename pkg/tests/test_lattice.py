import numpy as np
import pytest

from hormlab.analysis.lattice import Box, GridFunction, Lattice, SpaceTimeGridFunction, apply_field, partial
from hormlab.errors import DimensionError, HormlabError


def test_box_validation():
    with pytest.raises(HormlabError):
        Box((0.0, 1.0), (1.0, 1.0))
    with pytest.raises(DimensionError):
        Box((0.0,), (1.0, 1.0))


def test_box_geometry():
    box = Box.around([0.0, 1.0], [1.0, 2.0])
    assert box.volume == pytest.approx(8.0)
    assert box.radius_bound == pytest.approx(0.25)
    assert box.contains(np.array([[0.5, 2.5], [1.5, 0.0]])).tolist() == [True, False]


def test_centered_lattice_has_origin_node():
    lat = Lattice.centered([0.1, -0.2], [0.05, 0.01], [3, 4])
    assert lat.shape == (7, 9)
    np.testing.assert_allclose(lat.node(lat.nearest_index(np.array([0.1, -0.2]))), [0.1, -0.2])


def test_around_keeps_alignment():
    lat = Lattice.around([0.0, 0.0], Box((-0.31, -0.2), (0.2, 0.31)), [0.1, 0.1])
    assert lat.shape == (6, 6)
    np.testing.assert_allclose(lat.lower, [-0.3, -0.2])


def test_spanning_lattice_hits_faces():
    lat = Lattice.spanning(Box((0.0,), (1.0,)), [11])
    np.testing.assert_allclose(lat.upper, [1.0])
    assert lat.spacing == pytest.approx((0.1,))


def test_boundary_mask():
    lat = Lattice((0.0, 0.0), (1.0, 1.0), (4, 5))
    assert lat.boundary_mask().sum() == 4 * 5 - 2 * 3
    periodic = Lattice.cell_centered(Box((0.0,), (1.0,)), [8], periodic=True)
    assert not periodic.boundary_mask().any()


def test_partial_exact_for_quadratics():
    lat = Lattice.spanning(Box((0.0, 0.0), (1.0, 2.0)), [9, 11])
    mesh = lat.mesh()
    u = mesh[..., 0] ** 2 + 3 * mesh[..., 0] * mesh[..., 1]
    np.testing.assert_allclose(partial(u, lat, 0), 2 * mesh[..., 0] + 3 * mesh[..., 1], atol=1e-12)
    np.testing.assert_allclose(partial(u, lat, 1), 3 * mesh[..., 0], atol=1e-12)


def test_apply_field():
    lat = Lattice.spanning(Box((0.0, 0.0), (1.0, 1.0)), [5, 5])
    mesh = lat.mesh()
    coeffs = np.stack([np.ones(lat.shape), mesh[..., 0]], axis=-1)
    u = mesh[..., 0] + mesh[..., 1]
    np.testing.assert_allclose(apply_field(coeffs, u, lat), 1 + mesh[..., 0], atol=1e-12)


def test_grid_function_integral_midpoint():
    lat = Lattice.cell_centered(Box((0.0, 0.0), (1.0, 1.0)), [20, 20])
    u = GridFunction.from_callable(lat, lambda p: p[..., 0] + p[..., 1])
    assert u.integral() == pytest.approx(1.0)
    assert u.integral(np.zeros(lat.shape, dtype=bool)) == 0.0


def test_grid_function_integral_trapezoid():
    lat = Lattice.spanning(Box((0.0, 0.0), (1.0, 2.0)), [5, 9])
    assert lat.nodal
    u = GridFunction.from_callable(lat, lambda p: p[..., 0] + p[..., 1])
    assert u.integral() == pytest.approx(1.0 + 2.0)
    assert GridFunction(lat, np.ones(lat.shape)).integral() == pytest.approx(2.0)
    assert not Lattice.cell_centered(Box((0.0,), (1.0,)), [4]).nodal


def test_grid_function_validation():
    lat = Lattice((0.0,), (1.0,), (3,))
    with pytest.raises(DimensionError):
        GridFunction(lat, np.zeros(4))
    with pytest.raises(HormlabError):
        GridFunction(lat, np.array([0.0, np.nan, 1.0]))


def test_space_time_grid():
    lat = Lattice((0.0,), (0.5,), (3,))
    u = SpaceTimeGridFunction(lat, np.zeros((5, 3)), tau=0.25, t0=1.0)
    np.testing.assert_allclose(u.times, [1.0, 1.25, 1.5, 1.75, 2.0])
    assert u.T == pytest.approx(2.0)
    assert len(list(u)) == 5
    with pytest.raises(HormlabError):
        SpaceTimeGridFunction(lat, np.zeros((1, 3)), tau=0.25)
    with pytest.raises(DimensionError):
        SpaceTimeGridFunction.from_slices([GridFunction(lat, np.zeros(3)),
                                           GridFunction(Lattice((0.0,), (0.4,), (3,)), np.zeros(3))], 0.1)
