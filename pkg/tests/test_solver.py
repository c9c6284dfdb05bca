import logging

import numpy as np
import pytest

from ivmqr.densities import exact_fields
from ivmqr.domain import build_grid
from ivmqr.errors import InvalidStartError
from ivmqr.linearization import mirrored_direction, sample_tangent
from ivmqr.model import degenerate_model, example1_model, example2_model, identity_model
from ivmqr.solver import (
    AffineFamily,
    BendFamily,
    FitProblem,
    SmoothMaxFamily,
    family_for,
    fit,
    iteration_log_frame,
    local_uniqueness_probe,
    map_distance,
    perturbed_start,
    recovery_experiment,
)
from ivmqr.transport import BendPotential, QuadraticPotential, QuantileMap


# ============== Families ==============

def test_affine_family_packs_and_unpacks(example1):
    family = family_for(example1)
    assert isinstance(family, AffineFamily)
    theta = family.pack(example1.maps)
    assert theta.shape == (family.size,) == (10,)
    assert map_distance(family.maps(theta), example1.maps) == pytest.approx(0.0, abs=1e-14)


def test_unpack_rejects_wrong_length(example1):
    with pytest.raises(ValueError):
        family_for(example1).unpack(np.zeros(3))


def test_bend_family_mirrored_pair(degenerate):
    family = BendFamily(degenerate.measure.domain, 2)
    np.testing.assert_allclose(family.mirrored(0.4), [0.4, 0.0, -0.4, 0.0])
    assert family.pack(degenerate.maps) == pytest.approx(np.zeros(4))


def test_smooth_max_random_start_is_reproducible(square):
    family = SmoothMaxFamily(square, 2)
    np.testing.assert_array_equal(family.random_start(3), family.random_start(3))
    assert family.random_start(3).shape == (2 * 8 * 3,)


def test_unknown_family(example1):
    with pytest.raises(ValueError):
        family_for(example1, "spline")


def test_map_distance_of_shift(square):
    identity = QuantileMap(QuadraticPotential(np.eye(2)), square)
    shifted = QuantileMap(QuadraticPotential(np.eye(2), [0.1, 0.0]), square)
    assert map_distance((identity,), (shifted,)) == pytest.approx(0.1)


# ============== Fit ==============

def test_fit_from_truth_converges(example1):
    problem = FitProblem.from_model(example1)
    result = fit(problem, max_iterations=5, tolerance=1e-6)
    assert result.converged
    assert result.residual_norm < 1e-6
    assert result.map_distance < 1e-6
    assert len(result.roots) == 1
    log = iteration_log_frame(result)
    assert {"start", "iteration", "residual_z0", "residual_z1", "residual_norm", "damping", "parameters"} <= set(log)


def test_fit_rejects_start_outside_eigen_box(example1):
    family = family_for(example1)
    outside = family.pack(example1.maps) * 10.0
    problem = FitProblem.from_model(example1, initial=outside)
    with pytest.raises(InvalidStartError):
        fit(problem)
    with pytest.raises(InvalidStartError):
        fit(FitProblem.from_model(example1), starts=[np.zeros(4)])


def test_perturbed_start_moves_by_requested_distance(example1):
    problem = FitProblem.from_model(example1)
    truth = problem.family.pack(example1.maps)
    start = perturbed_start(problem, truth, 0.05, seed=0)
    assert problem.admissible(start)
    assert 0.0 < map_distance(problem.family.maps(start), example1.maps) <= 0.05 * 1.01


# ============== Local uniqueness ==============

def test_local_uniqueness_grows_linearly(example1):
    grid = build_grid(example1.measure.domain, 20)
    directions = sample_tangent(example1.maps, seed=6, count=3, eigen_bounds=example1.eigen_bounds)
    table = local_uniqueness_probe(
        example1.maps, exact_fields(example1), grid, [0.0, 1e-3, 2e-3], directions, example1.measure,
        example1.eigen_bounds,
    )
    assert np.all(table.residuals[0] < 1e-6)
    assert table.admissible.all()
    assert table.envelope_slope > 0.0
    doubling = [entry for entry in table.doubling_ratios if entry["radius"] == 1e-3][0]
    for ratio in doubling["ratios"]:
        assert 1.8 <= ratio <= 2.2
    assert len(table.to_frame()) == 3 * len(directions)


@pytest.mark.slow
def test_local_uniqueness_doubles_over_many_directions(example1):
    grid = build_grid(example1.measure.domain, 20)
    directions = sample_tangent(example1.maps, seed=13, count=20, eigen_bounds=example1.eigen_bounds)
    table = local_uniqueness_probe(
        example1.maps, exact_fields(example1), grid, [1e-3, 2e-3, 4e-3], directions, example1.measure,
        example1.eigen_bounds,
    )
    assert table.admissible[0].all()
    assert table.envelope_slope > 0.0
    assert [entry["radius"] for entry in table.doubling_ratios] == [1e-3, 2e-3]
    for entry in table.doubling_ratios:
        finite = [ratio for ratio in entry["ratios"] if np.isfinite(ratio)]
        assert len(finite) >= 15
        assert all(1.8 <= ratio <= 2.2 for ratio in finite)


def test_mirrored_bend_leaves_no_residual(degenerate):
    grid = build_grid(degenerate.measure.domain, 20)
    h = mirrored_direction(degenerate.maps, BendPotential([1.0, 0.0]))
    table = local_uniqueness_probe(
        degenerate.maps, exact_fields(degenerate), grid, [1e-3, 2e-3, 4e-3], [h], degenerate.measure,
        degenerate.eigen_bounds,
    )
    assert np.all(table.residuals < 1e-8)


# ============== Recovery ==============

@pytest.mark.slow
def test_example1_recovery():
    model = example1_model(np.eye(2), np.diag([1.0, 1.25]), eigen_bounds=(0.7, 1.3))
    report = recovery_experiment(model, seed=0, probe_directions=5)
    assert report.map_error < 1e-3
    assert report.passed
    assert report.start_distance > report.map_error


@pytest.mark.slow
def test_example2_recovery():
    model = example2_model([[0.0, 0.0], [0.5, -0.5]])
    report = recovery_experiment(model, seed=0, probe_directions=5)
    assert report.map_error < 5e-3


@pytest.mark.slow
def test_negative_control_has_flat_direction():
    report = recovery_experiment(degenerate_model(), seed=0, negative_control=True, probe_directions=3)
    assert report.negative_control
    assert report.passed == report.expected_failure
    assert report.tight_map_error is not None
    assert report.probe_minimum < 1e-10


@pytest.mark.slow
def test_negative_control_from_perturbed_starts():
    truth = degenerate_model()
    failures = 0
    for seed in range(5):
        report = recovery_experiment(truth, seed=seed, negative_control=True, probe_directions=0, grid_resolution=10)
        assert report.start_distance > 0.0
        assert "bend family started from a perturbed truth" in report.notes
        if report.expected_failure:
            failures += 1
            assert report.tight_map_error >= 0.5 * report.map_error
            assert report.map_error > 1e-3
    assert failures >= 4


@pytest.mark.slow
def test_recovery_warns_when_condition_12_fails(caplog):
    model = identity_model([[0.9, 0.1], [0.1, 0.9]])
    with caplog.at_level(logging.WARNING, logger="ivmqr.solver"):
        report = recovery_experiment(model, seed=0, probe_directions=0, grid_resolution=10)
    assert not report.conditions["condition-12"].passed
    assert "condition-12 fails: recovery is not guaranteed" in report.notes
    assert any("condition-12 fails" in r.getMessage() for r in caplog.records)


@pytest.mark.slow
def test_recovery_is_quiet_when_condition_12_holds(caplog):
    model = identity_model([[0.9, 0.1], [0.1, 0.9]], eigen_bounds=(0.5, 2.0))
    with caplog.at_level(logging.WARNING, logger="ivmqr.solver"):
        report = recovery_experiment(model, seed=0, probe_directions=0, grid_resolution=10)
    assert report.conditions["condition-12"].passed
    assert not any("condition-12" in note for note in report.notes)
    assert not any("condition-12 fails" in r.getMessage() for r in caplog.records)
