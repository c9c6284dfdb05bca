import numpy as np
import pytest

from ivmqr.densities import exact_fields
from ivmqr.domain import ReferenceDomain, ReferenceMeasure, build_grid
from ivmqr.errors import NoDirectionsError, SingularMatrixError
from ivmqr.linearization import (
    SignedGridMeasure,
    TangentDirection,
    audit_points,
    cofactor,
    conormal_sign_check,
    differentiability_gaps,
    divergence_form_density,
    full_rank_probe,
    mirrored_direction,
    perturb_maps,
    phi,
    phi_prime,
    piola_residual,
    reference_on_grid,
    sample_tangent,
    tv_norm,
    zero_direction,
)
from ivmqr.transport import (
    BendPotential,
    QuadraticPotential,
    QuantileMap,
    SmoothMaxPotential,
    SumPotential,
    check_class_membership,
)


def smooth_map(seed=3):
    domain = ReferenceDomain.cube(2)
    return QuantileMap(SmoothMaxPotential.random(domain, 4, np.random.default_rng(seed)), domain)


# ============== Signed measures ==============

def test_tv_norm_of_signed_density(square_grid):
    density = np.where(square_grid.nodes[:, 0] < 0.5, 1.0, -1.0)
    measure = SignedGridMeasure(square_grid, density)
    assert tv_norm(measure) == pytest.approx(1.0)
    assert measure.total_mass == pytest.approx(0.0, abs=1e-12)
    assert tv_norm(measure.scaled(-3.0)) == pytest.approx(3.0)


def test_reference_on_grid_has_unit_mass(square_grid):
    mu = reference_on_grid(ReferenceMeasure.uniform_cube(2), square_grid)
    assert mu.total_mass == pytest.approx(1.0)
    assert tv_norm(mu - mu) == 0.0


# ============== Cofactor and Piola ==============

def test_cofactor_examples():
    np.testing.assert_allclose(cofactor([[1.0, 2.0], [3.0, 4.0]]), [[4.0, -2.0], [-3.0, 1.0]])
    np.testing.assert_allclose(cofactor(np.diag([2.0, 3.0])), np.diag([3.0, 2.0]))
    np.testing.assert_allclose(cofactor(np.diag([1.0, 2.0, 4.0])), np.diag([8.0, 4.0, 2.0]))
    np.testing.assert_allclose(cofactor([[5.0]]), [[1.0]])


def test_cofactor_is_determinant_times_inverse():
    rng = np.random.default_rng(3)
    stack = rng.normal(size=(6, 3, 3)) + 3.0 * np.eye(3)
    expected = np.linalg.det(stack)[:, None, None] * np.linalg.inv(stack)
    np.testing.assert_allclose(cofactor(stack), expected, atol=1e-10)
    planar = stack[:, :2, :2]
    expected = np.linalg.det(planar)[:, None, None] * np.linalg.inv(planar)
    np.testing.assert_allclose(cofactor(planar), expected, atol=1e-10)


def test_cofactor_of_singular_matrix_raises():
    with pytest.raises(SingularMatrixError):
        cofactor([[1.0, 2.0], [2.0, 4.0]])


def test_piola_residual_vanishes_for_affine_maps(example1, square_grid):
    assert piola_residual(example1.maps[1], square_grid) == 0.0
    line = ReferenceDomain.cube(1)
    q = QuantileMap(SmoothMaxPotential.random(line, 3, np.random.default_rng(0)), line)
    assert piola_residual(q, build_grid(line, 20)) == 0.0


def test_piola_residual_is_second_order(square_grid):
    q = smooth_map()
    coarse = piola_residual(q, square_grid, 1e-2)
    fine = piola_residual(q, square_grid, 5e-3)
    assert coarse > 0.0
    assert coarse / fine == pytest.approx(4.0, rel=0.3)


# ============== Operator ==============

def test_phi_of_identity_maps_is_uniform(uniform_model, square_grid):
    fields = exact_fields(uniform_model)
    for z in range(2):
        np.testing.assert_allclose(phi(uniform_model.maps, z, fields, square_grid).density, 1.0)


def test_phi_at_truth_reproduces_mu(example1, square_grid):
    fields = exact_fields(example1)
    mu = reference_on_grid(example1.measure, square_grid)
    for z in range(2):
        deviation = phi(example1.maps, z, fields, square_grid) - mu
        assert np.abs(deviation.density).max() < 1e-6


def test_phi_away_from_truth_misses_mu(example1, stretched, square_grid):
    fields = exact_fields(example1)
    mu = reference_on_grid(example1.measure, square_grid)
    assert tv_norm(phi(stretched.maps, 0, fields, square_grid) - mu) > 1e-3


def test_phi_prime_of_zero_direction(example1, square_grid):
    h = zero_direction(2, 2)
    derivative = phi_prime(example1.maps, h, 0, exact_fields(example1), square_grid)
    np.testing.assert_allclose(derivative.density, 0.0, atol=1e-12)


def test_phi_prime_volume_term(uniform_model, square_grid):
    h = TangentDirection((QuadraticPotential(np.eye(2)), QuadraticPotential(2.0 * np.eye(2))))
    derivative = phi_prime(uniform_model.maps, h, 0, exact_fields(uniform_model), square_grid)
    # 0.9 * tr(I) + 0.1 * tr(2I)
    np.testing.assert_allclose(derivative.density, 2.2)
    assert derivative.provenance == "exact"


def test_difference_quotients_converge(example1):
    grid = build_grid(example1.measure.domain, 30)
    fields = exact_fields(example1)
    for h in sample_tangent(example1.maps, seed=1, count=3, eigen_bounds=example1.eigen_bounds):
        for z in range(2):
            coarse, fine = differentiability_gaps(example1.maps, h, z, fields, grid, (1e-2, 1e-3))
            assert fine < coarse / 5.0


def test_divergence_form_matches_phi_prime(example1, square_grid):
    fields = exact_fields(example1)
    h = sample_tangent(example1.maps, seed=2, count=1, eigen_bounds=example1.eigen_bounds)[0]
    mask, divergence = divergence_form_density(example1.maps, h, 0, fields, square_grid, 1e-4)
    derivative = phi_prime(example1.maps, h, 0, fields, square_grid)
    assert mask.all()
    np.testing.assert_allclose(divergence, derivative.density[mask], atol=1e-5)


@pytest.mark.slow
def test_difference_quotients_converge_over_many_directions(example1):
    grid = build_grid(example1.measure.domain, 30)
    fields = exact_fields(example1)
    directions = sample_tangent(example1.maps, seed=11, count=20, eigen_bounds=example1.eigen_bounds)
    assert len(directions) == 20
    for h in directions:
        for z in range(2):
            coarse, fine = differentiability_gaps(example1.maps, h, z, fields, grid, (1e-2, 1e-3))
            assert fine < coarse / 5.0 or fine < 1e-10


# ============== Tangent directions ==============

def test_sample_tangent_rejects_everything_when_k_is_tiny(example1):
    assert sample_tangent(example1.maps, K=1e-6, count=2, max_attempts=5) == []


def test_sampled_directions_are_admissible(example1, square_grid):
    directions = sample_tangent(example1.maps, K=10.0, seed=4, count=3, eigen_bounds=example1.eigen_bounds)
    assert len(directions) == 3
    lower, upper = example1.eigen_bounds
    audit = audit_points(example1.measure.domain)
    for h in directions:
        assert 0.0 < h.alpha <= 0.1
        assert h.sup_norm(audit) == pytest.approx(1.0)
        assert h.derivative_norm(audit) <= 10.0
        for d in range(2):
            jac = h.jacobian(d, square_grid.nodes)
            np.testing.assert_allclose(jac, np.swapaxes(jac, 1, 2), atol=1e-12)
        step = min(1e-3, h.alpha)
        assert all(check_class_membership(q, square_grid, lower, upper).passed
                   for q in perturb_maps(example1.maps, h, step))


def test_normalization_ignores_scale(square_grid):
    domain = ReferenceDomain.cube(2)
    psi = SmoothMaxPotential.random(domain, 4, np.random.default_rng(7))
    one = TangentDirection.normalized([psi, psi], domain)
    three = TangentDirection.normalized([SumPotential((psi,), (3.0,))] * 2, domain)
    np.testing.assert_allclose(one.field(0, square_grid.nodes), three.field(0, square_grid.nodes), atol=1e-12)


def test_normalizing_zero_direction_raises():
    with pytest.raises(ValueError):
        TangentDirection.normalized(zero_direction(2, 2).potentials, ReferenceDomain.cube(2))


# ============== Probes ==============

def test_probe_needs_directions(example1, square_grid):
    with pytest.raises(NoDirectionsError):
        full_rank_probe(example1.maps, exact_fields(example1), square_grid, [])


def test_probe_is_positive_at_identified_model(example1):
    grid = build_grid(example1.measure.domain, 12)
    directions = sample_tangent(example1.maps, seed=5, count=5, eigen_bounds=example1.eigen_bounds)
    report = full_rank_probe(example1.maps, exact_fields(example1), grid, directions)
    assert report.minimum > 1e-3
    assert len(report.values) == len(directions)
    assert report.values[report.index] == report.minimum


@pytest.mark.slow
def test_full_rank_stays_positive_over_many_directions(example1):
    grid = build_grid(example1.measure.domain, 12)
    directions = sample_tangent(example1.maps, seed=9, count=200, eigen_bounds=example1.eigen_bounds)
    assert len(directions) == 200
    report = full_rank_probe(example1.maps, exact_fields(example1), grid, directions)
    assert report.minimum > 0.0
    assert len(report.values) == 200


def test_mirrored_direction_is_invisible_to_degenerate_model(degenerate, square_grid):
    h = mirrored_direction(degenerate.maps, BendPotential([1.0, 0.0]))
    report = full_rank_probe(degenerate.maps, exact_fields(degenerate), square_grid, [h])
    assert report.minimum < 1e-10


def test_conormal_sign_check(example1):
    for q in example1.maps:
        assert conormal_sign_check(q).passed
    assert conormal_sign_check(smooth_map()).passed
