import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ivmqr.domain import QuadratureGrid, ReferenceDomain, build_grid
from ivmqr.errors import (
    BoundaryDerivativeWarning,
    DomainViolationError,
    InvalidCycleError,
    InvalidModelError,
    NoPreimageError,
    SizeMismatchError,
)
from ivmqr.transport import (
    BendPotential,
    QuadraticPotential,
    QuantileMap,
    SmoothMaxPotential,
    SumPotential,
    bijectivity_probe,
    brenier_from_samples,
    check_class_membership,
    cyclical_monotonicity_check,
    eval_map,
    jacobian,
    legendre_invert,
    potential_from_dict,
    potential_to_dict,
)

SQUARE = ReferenceDomain.cube(2)
M = np.array([[2.0, 1.0], [1.0, 2.0]])

interior = st.tuples(st.floats(0.05, 0.95), st.floats(0.05, 0.95)).map(np.array)


def quadratic_map(matrix, shift=None, strict=True):
    return QuantileMap(QuadraticPotential(np.asarray(matrix, dtype=float), shift, strict=strict), SQUARE)


def smooth_max_map(seed=3, pieces=4):
    return QuantileMap(SmoothMaxPotential.random(SQUARE, pieces, np.random.default_rng(seed)), SQUARE)


def central_difference(func, u, step):
    out = []
    for i in range(u.shape[0]):
        e = np.zeros_like(u)
        e[i] = step
        out.append((func(u + e) - func(u - e)) / (2 * step))
    return np.array(out)


# ============== Evaluation ==============

def test_identity_and_linear_maps():
    assert np.allclose(eval_map(quadratic_map(np.eye(2)), [0.3, 0.7]), [0.3, 0.7])
    assert np.allclose(eval_map(quadratic_map(M), [1.0, 0.0]), [2.0, 1.0])


def test_eval_outside_domain():
    with pytest.raises(DomainViolationError):
        eval_map(quadratic_map(np.eye(2)), [1.2, 0.5])


def test_non_spd_quadratic_rejected():
    with pytest.raises(InvalidModelError):
        QuadraticPotential(np.diag([1.0, -1.0]))


@given(interior)
def test_smooth_max_gradient_matches_finite_difference(u):
    q = smooth_max_map()
    numeric = central_difference(lambda x: q.potential.value(x[None, :])[0], u, 1e-5)
    assert np.allclose(q.evaluate(u[None, :])[0], numeric, atol=1e-6)


def test_smooth_max_hessian_matches_finite_difference():
    q = smooth_max_map()
    u = np.array([0.5, 0.5])
    numeric = central_difference(lambda x: q.evaluate(x[None, :])[0], u, 1e-5)
    assert np.allclose(jacobian(q, u), numeric, atol=1e-5)


def test_third_derivative_matches_finite_difference():
    q = smooth_max_map(seed=5)
    u = np.array([0.4, 0.6])
    numeric = central_difference(lambda x: q.jacobians(x[None, :])[0], u, 1e-5)
    assert np.allclose(q.potential.third_derivative(u[None, :])[0], numeric, atol=1e-4)


@given(interior)
def test_jacobians_are_symmetric(u):
    for q in (smooth_max_map(), quadratic_map(M)):
        J = jacobian(q, u)
        assert np.abs(J - J.T).max() < 1e-9


def test_boundary_jacobian_warns():
    with pytest.warns(BoundaryDerivativeWarning):
        J = jacobian(quadratic_map(M), [0.0, 0.5])
    assert np.allclose(J, M)


def test_bend_preserves_faces():
    potential = SumPotential((QuadraticPotential(np.eye(2)), BendPotential([0.4, 0.0])), (1.0, 1.0))
    faces = SQUARE.boundary_points(6)
    assert np.allclose(potential.gradient(faces)[:, 0][faces[:, 0] == 0.0], 0.0)
    assert np.allclose(potential.gradient(faces)[:, 0][faces[:, 0] == 1.0], 1.0)


def test_potential_dict_round_trip():
    potential = SumPotential((QuadraticPotential(M), BendPotential([0.2, 0.1])), (1.0, 0.5))
    rebuilt = potential_from_dict(potential_to_dict(potential))
    u = np.random.default_rng(0).random((10, 2))
    assert np.allclose(rebuilt.gradient(u), potential.gradient(u))


# ============== Class membership ==============

def test_membership_examples():
    grid = build_grid(SQUARE, 10)
    identity = check_class_membership(quadratic_map(np.eye(2)), grid, 0.5, 2.0)
    assert identity.passed and identity.min_eigenvalue == pytest.approx(1.0) and identity.max_eigenvalue == pytest.approx(1.0)
    assert not check_class_membership(quadratic_map(np.diag([0.4, 1.0])), grid, 0.5, 2.0).passed
    inverse = np.linalg.inv(np.diag([1.0, 2.0]))
    report = check_class_membership(quadratic_map(inverse), grid, 0.4, 1.1)
    assert report.passed
    assert report.min_eigenvalue == pytest.approx(0.5)


def test_membership_rejects_bad_bounds():
    with pytest.raises(ValueError):
        check_class_membership(quadratic_map(np.eye(2)), build_grid(SQUARE, 4), 2.0, 0.5)


# ============== Cyclical monotonicity ==============

def test_two_cycle_sum():
    a, b = np.array([0.2, 0.3]), np.array([0.7, 0.1])
    report = cyclical_monotonicity_check(quadratic_map(np.eye(2)), [np.array([a, b, a])])
    assert report.min_cycle_sum == pytest.approx(np.sum((a - b) ** 2))
    assert report.strict


def test_degenerate_cycle():
    a = np.array([0.4, 0.4])
    report = cyclical_monotonicity_check(quadratic_map(np.eye(2)), [np.array([a, a, a])])
    assert report.min_cycle_sum == 0.0
    assert report.strict


def test_malformed_cycle():
    with pytest.raises(InvalidCycleError):
        cyclical_monotonicity_check(quadratic_map(np.eye(2)), [np.array([[0.1, 0.1], [0.2, 0.2]])])


def test_random_three_cycles(example1):
    rng = np.random.default_rng(11)
    cycles = []
    for _ in range(1000):
        pts = rng.random((3, 2))
        cycles.append(np.vstack([pts, pts[:1]]))
    report = cyclical_monotonicity_check(example1.maps[1], cycles)
    assert report.strict
    assert report.min_cycle_sum > 0


# ============== Inversion ==============

def test_invert_examples():
    assert np.allclose(legendre_invert(quadratic_map(np.eye(2)), [0.2, 0.9]), [0.2, 0.9])
    assert np.allclose(legendre_invert(quadratic_map(M), [2.0, 1.0]), [1.0, 0.0])


def test_invert_outside_image():
    with pytest.raises(NoPreimageError):
        legendre_invert(quadratic_map(np.eye(2)), [1.5, 0.5])


@given(interior)
def test_smooth_max_round_trip(u):
    q = smooth_max_map()
    y = q.evaluate(u[None, :])[0]
    back = legendre_invert(q, y)
    assert np.linalg.norm(q.evaluate(back[None, :])[0] - y) <= 1e-8


def test_bijectivity(example1):
    grid = build_grid(SQUARE, 20)
    identity = bijectivity_probe(quadratic_map(np.eye(2)), grid)
    assert identity.max_roundtrip_error < 1e-12
    assert bijectivity_probe(example1.maps[1], grid).max_roundtrip_error < 1e-7


def test_singular_map_is_not_injective():
    collapsing = quadratic_map(0.5 * np.ones((2, 2)), strict=False)
    report = bijectivity_probe(collapsing, build_grid(SQUARE, 20))
    assert not report.injective
    assert not report.passed


def test_bijectivity_without_interior_nodes_fails(caplog):
    edge = QuadratureGrid(SQUARE, np.array([[0.0, 0.0], [1.0, 0.5]]), np.array([0.5, 0.5]), 1)
    with caplog.at_level("WARNING", logger="ivmqr.transport"):
        report = bijectivity_probe(quadratic_map(np.eye(2)), edge)
    assert not report.passed
    assert not report.injective
    assert report.max_roundtrip_error == float("inf")
    assert "no interior nodes" in caplog.text


# ============== Discrete transport ==============

def test_same_cloud_is_identity():
    points = np.random.default_rng(0).random((8, 2))
    plan = brenier_from_samples(points, points)
    assert np.array_equal(plan.assignment, np.arange(8))
    assert plan.cost == pytest.approx(0.0, abs=1e-14)


def test_affine_pairing_recovered():
    rng = np.random.default_rng(1)
    source = rng.random((6, 2))
    shift = np.array([0.3, -0.2])
    order = rng.permutation(6)
    target = (shift + source @ M)[order]
    plan = brenier_from_samples(source, target)
    assert np.array_equal(order[plan.assignment], np.arange(6))
    assert plan.cost == pytest.approx(np.sum((source - shift - source @ M) ** 2))


def test_assignment_matches_brute_force():
    rng = np.random.default_rng(2)
    source, target = rng.random((6, 2)), rng.random((6, 2))
    best = min(
        sum(np.sum((source[i] - target[j]) ** 2) for i, j in enumerate(perm))
        for perm in itertools.permutations(range(6))
    )
    assert brenier_from_samples(source, target).cost == pytest.approx(best)


def test_assignment_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n, p = int(rng.integers(1, 8)), int(rng.integers(1, 4))
        source, target = rng.normal(size=(n, p)), rng.normal(size=(n, p))
        cost = ((source[:, None, :] - target[None, :, :]) ** 2).sum(axis=2)
        perms = np.array(list(itertools.permutations(range(n))))
        best = cost[np.arange(n), perms].sum(axis=1).min()
        plan = brenier_from_samples(source, target)
        assert plan.method == "assignment"
        assert plan.cost == pytest.approx(best, rel=1e-12, abs=1e-12)


def test_scalar_coupling_is_the_sorted_pairing():
    rng = np.random.default_rng(8)
    for _ in range(100):
        n = int(rng.integers(2, 60))
        source, target = rng.normal(size=n), rng.exponential(size=n)
        plan = brenier_from_samples(source[:, None], target[:, None])
        paired = target[plan.assignment][np.argsort(source)]
        assert np.all(np.diff(paired) > 0)
        assert plan.cost == pytest.approx(np.sum((np.sort(source) - np.sort(target)) ** 2))


def test_entropic_plan_marginals():
    rng = np.random.default_rng(4)
    source, target = rng.random((30, 2)), rng.random((30, 2))
    plan = brenier_from_samples(source, target, exact_limit=10)
    assert plan.method == "sinkhorn"
    rows, cols = plan.marginals()
    assert np.allclose(rows, 1.0 / 30, atol=1e-4)
    assert np.allclose(cols, 1.0 / 30, atol=1e-4)


def test_size_mismatch():
    with pytest.raises(SizeMismatchError):
        brenier_from_samples(np.zeros((3, 2)), np.zeros((4, 2)))
