import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ivmqr.domain import (
    ReferenceDomain,
    ReferenceMeasure,
    RankSet,
    build_grid,
    default_rank_sets,
    grid_to_frame,
    measure_of_set,
    perturb_ranks,
    sample_mu,
)
from ivmqr.errors import InvalidResolutionError, UnsupportedDomainError

coordinates = arrays(np.float64, (5, 2), elements=st.floats(-3.0, 3.0))


# ============== Sampling ==============

def test_sample_is_repeatable():
    measure = ReferenceMeasure.uniform_cube(2)
    first = sample_mu(measure, 4, seed=7)
    second = sample_mu(measure, 4, seed=7)
    assert first.shape == (4, 2)
    assert np.array_equal(first, second)
    assert ((first >= 0) & (first <= 1)).all()


def test_uniform_mean():
    u = sample_mu(ReferenceMeasure.uniform_cube(1), 100_000, seed=1)
    assert abs(u[:, 0].mean() - 0.5) < 0.005


def test_spherical_uniform_radius_is_uniform():
    u = sample_mu(ReferenceMeasure.spherical_uniform(2), 100_000, seed=2)
    assert abs(np.linalg.norm(u, axis=1).mean() - 0.5) < 0.005


def test_sample_rejects_empty():
    with pytest.raises(ValueError):
        sample_mu(ReferenceMeasure.uniform_cube(2), 0, seed=0)


def test_perturbed_ranks_stay_uniform():
    measure = ReferenceMeasure.uniform_cube(2)
    rng = np.random.default_rng(0)
    moved = perturb_ranks(measure, sample_mu(measure, 50_000, seed=3), 0.25, rng)
    assert measure.domain.contains(moved).all()
    assert np.allclose(moved.mean(axis=0), 0.5, atol=0.01)


# ============== Quadrature ==============

def test_grid_p1():
    grid = build_grid(ReferenceDomain.cube(1), 4)
    assert np.allclose(grid.nodes[:, 0], [0.125, 0.375, 0.625, 0.875])
    assert np.allclose(grid.weights, 0.25)


def test_grid_p2_small():
    grid = build_grid(ReferenceDomain.cube(2), 3)
    assert grid.size == 9
    assert np.allclose(grid.weights, 1.0 / 9.0)


def test_grid_weights_partition_the_square():
    grid = build_grid(ReferenceDomain.cube(2), 50)
    assert abs(grid.weights.sum() - 1.0) < 1e-12


def test_disc_grid_integrates_spherical_uniform():
    measure = ReferenceMeasure.spherical_uniform(2)
    grid = build_grid(measure.domain, 20)
    assert abs(grid.integrate(measure.density(grid.nodes)) - 1.0) < 1e-12
    assert abs(grid.weights.sum() - np.pi) < 1e-12


def test_grid_errors():
    with pytest.raises(InvalidResolutionError):
        build_grid(ReferenceDomain.cube(2), 1)
    with pytest.raises(UnsupportedDomainError):
        build_grid(ReferenceDomain.ball(3), 10)


def test_grid_frame_columns():
    frame = grid_to_frame(build_grid(ReferenceDomain.cube(2), 3))
    assert list(frame.columns) == ["u1", "u2", "weight"]


# ============== Measure of sets ==============

def test_measure_of_square():
    measure = ReferenceMeasure.uniform_cube(2)
    grid = build_grid(measure.domain, 100)
    inside = lambda u: np.all(u <= 0.5, axis=1)
    assert abs(measure_of_set(measure, inside, grid) - 0.25) < 1e-3


def test_measure_of_interval():
    measure = ReferenceMeasure.uniform_cube(1)
    grid = build_grid(measure.domain, 1000)
    assert abs(measure_of_set(measure, lambda u: u[:, 0] <= 0.3, grid) - 0.3) < 1e-3


def test_measure_of_triangle():
    measure = ReferenceMeasure.uniform_cube(2)
    grid = build_grid(measure.domain, 200)
    assert abs(measure_of_set(measure, lambda u: u.sum(axis=1) <= 1.0, grid) - 0.5) < 5e-3


def test_rank_set_masses():
    measure = ReferenceMeasure.uniform_cube(2)
    assert RankSet.box([0, 0], [0.5, 0.5]).mass(measure) == pytest.approx(0.25)
    assert RankSet.half_space([1.0, 0.0], 0.5).mass(measure) == pytest.approx(0.5, abs=2e-3)
    with pytest.raises(ValueError):
        RankSet.box([0.6, 0], [0.5, 1])


def test_default_sets():
    sets = default_rank_sets(ReferenceDomain.cube(2))
    assert len(sets) == 12
    assert sum(s.kind == "box" for s in sets) == 8
    assert RankSet.from_dict(sets[-1].to_dict()).offset == sets[-1].offset


# ============== Geometry ==============

def test_signed_distance_and_normals():
    cube = ReferenceDomain.cube(2)
    d = cube.signed_distance(np.array([[0.5, 0.5], [0.5, 1.0], [1.5, 0.5]]))
    assert np.allclose(d, [-0.5, 0.0, 0.5])
    assert np.allclose(cube.outward_normal(np.array([[1.0, 0.3]])), [[1.0, 0.0]])
    ball = ReferenceDomain.ball(2)
    assert np.allclose(ball.outward_normal(np.array([[0.0, 1.0]])), [[0.0, 1.0]])


@given(coordinates)
def test_projection_lands_in_domain(points):
    for domain in (ReferenceDomain.cube(2), ReferenceDomain.ball(2)):
        projected = domain.project(points)
        assert domain.contains(projected, tol=1e-12).all()
        inside = domain.contains(points, tol=0.0)
        assert np.allclose(projected[inside], points[inside])


def test_boundary_points_lie_on_boundary():
    for domain in (ReferenceDomain.cube(2), ReferenceDomain.ball(2)):
        points = domain.boundary_points(8)
        assert np.allclose(domain.signed_distance(points), 0.0, atol=1e-12)
