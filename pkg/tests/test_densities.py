from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from ivmqr.densities import (
    KernelDensityField,
    estimate_density,
    estimated_fields,
    exact_fields,
    field_to_frame,
    identify_support,
)
from ivmqr.domain import build_grid
from ivmqr.errors import InsufficientDataError, InvalidBandwidthError, UnsupportedCouplingError
from ivmqr.model import SIMILARITY, example1_model, example2_model, identity_model, rank_violation_model, simulate

SHARES_09 = [[0.9, 0.1], [0.1, 0.9]]


def interior_grid(resolution=20):
    mids = (np.arange(resolution) + 0.5) / resolution
    return np.stack(np.meshgrid(mids, mids, indexing="ij"), axis=-1).reshape(-1, 2)


# ============== Exact fields ==============

def test_uniform_pushforward(uniform_model):
    fields = exact_fields(uniform_model)
    inside = np.array([[0.2, 0.3], [0.8, 0.9]])
    outside = np.array([[1.2, 0.3], [-0.1, 0.5]])
    for (d, z), field in fields.items():
        assert np.allclose(field.evaluate(inside), SHARES_09[d][z])
        assert np.allclose(field.evaluate(outside), 0.0)
        assert field.provenance == "exact"


def test_change_of_variables(stretched):
    fields = exact_fields(stretched)
    y = np.array([[0.5, 0.25], [0.1, 0.45]])
    assert np.allclose(fields[(1, 1)].evaluate(y), 2.0 * 0.9)
    assert np.allclose(fields[(1, 0)].evaluate(y), 2.0 * 0.1)
    assert np.allclose(fields[(1, 0)].evaluate(np.array([[0.5, 0.7]])), 0.0)


def test_fields_integrate_to_shares(stretched):
    for (d, z), field in exact_fields(stretched).items():
        assert abs(field.integrate(100) - stretched.share_matrix()[d, z]) < 2e-2


def test_affine_field_gradient_vanishes(example1):
    field = exact_fields(example1)[(1, 0)]
    y = np.array([[0.4, 0.3]])
    assert np.allclose(field.gradient(y), 0.0)


def test_support_distance_sign(stretched):
    field = exact_fields(stretched)[(1, 0)]
    d = field.support_distance(np.array([[0.5, 0.25], [0.5, 0.5], [0.5, 0.8]]))
    assert d[0] < 0
    assert abs(d[1]) < 1e-9
    assert d[2] > 0


def cell_index(model, d, ys, cells=4):
    lo, hi = model.maps[d].image_box
    k = np.clip(np.floor((ys - lo) / (hi - lo) * cells).astype(int), 0, cells - 1)
    return d * cells * cells + k[:, 0] * cells + k[:, 1]


def cell_masses(model, z, resolution=400, cells=4):
    """P(Y in cell, D=d | Z=z) by pulling the exact density back to U: the integrand becomes the rank weight."""
    grid = build_grid(model.measure.domain, resolution)
    masses = np.zeros(model.treatments * cells * cells)
    for d in range(model.treatments):
        ys = model.maps[d].evaluate(grid.nodes)
        weights = grid.weights * model.rank_weight(d, z, grid.nodes)
        masses += np.bincount(cell_index(model, d, ys, cells), weights, minlength=masses.size)
    return masses


@pytest.mark.slow
@pytest.mark.parametrize(
    "model",
    [
        example1_model(np.eye(2), np.diag([1.0, 1.25]), compliance=0.9),
        example2_model([[0.0, 0.0], [0.5, -0.5]]),
    ],
    ids=["example1", "example2"],
)
def test_simulated_cells_match_exact_density(model):
    sample = simulate(model, 100_000, seed=11)
    for z in range(2):
        rows = sample.z == z
        observed = np.zeros(2 * 16)
        for d in range(2):
            picked = rows & (sample.d == d)
            observed += np.bincount(cell_index(model, d, sample.y[picked]), minlength=observed.size)
        expected = cell_masses(model, z)
        expected *= observed.sum() / expected.sum()
        # cells with fewer than 5 expected rows are pooled
        small = expected < 5.0
        obs, exp = observed[~small], expected[~small]
        if expected[small].sum() > 0.0:
            obs = np.append(obs, observed[small].sum())
            exp = np.append(exp, expected[small].sum())
        statistic = float(np.sum((obs - exp) ** 2 / exp))
        assert stats.chi2.sf(statistic, obs.size - 1) > 1e-3


def test_unsupported_coupling():
    model = replace(rank_violation_model(), coupling=SIMILARITY)
    with pytest.raises(UnsupportedCouplingError):
        exact_fields(model)


# ============== Kernel fields ==============

@pytest.mark.slow
def test_kernel_estimate_close_to_truth(uniform_model):
    sample = simulate(uniform_model, 100_000, seed=6)
    estimated = estimated_fields(sample, 2)
    exact = exact_fields(uniform_model)
    points = interior_grid()
    for key in exact:
        gap = np.abs(estimated[key].evaluate(points) - exact[key].evaluate(points)).max()
        assert gap <= 0.1


def test_kernel_mass_equals_empirical_share(uniform_model):
    sample = simulate(uniform_model, 20_000, seed=1)
    shares = sample.empirical_shares(2)
    for (d, z), field in estimated_fields(sample, 2).items():
        assert isinstance(field, KernelDensityField)
        assert abs(field.total_mass - shares[d, z]) < 1e-6
        assert field.gradient_provenance == "finite-difference"


def test_zero_bandwidth_rejected(uniform_model):
    sample = simulate(uniform_model, 5_000, seed=2)
    with pytest.raises(InvalidBandwidthError):
        estimate_density(sample, 0, 0, bandwidth=0.0)


def test_too_few_rows(uniform_model):
    sample = simulate(uniform_model, 150, seed=2)
    with pytest.raises(InsufficientDataError):
        estimate_density(sample, 1, 0)


def test_field_frame(uniform_model):
    frame = field_to_frame(exact_fields(uniform_model)[(0, 0)], resolution=5)
    assert list(frame.columns) == ["y1", "y2", "value"]
    assert len(frame) == 25


# ============== Support ==============

def test_identity_support(uniform_model):
    fields = exact_fields(uniform_model)
    support = identify_support([fields[(0, 0)], fields[(0, 1)]])
    lo, hi = support.box
    width = support.widths.max()
    assert np.allclose(lo, 0.0, atol=width)
    assert np.allclose(hi, 1.0, atol=width)


def test_affine_image_support(stretched):
    fields = exact_fields(stretched)
    support = identify_support([fields[(1, 0)], fields[(1, 1)]])
    lo, hi = support.box
    assert np.all(np.abs(lo - [0.0, 0.0]) <= support.widths)
    assert np.all(np.abs(hi - [1.0, 0.5]) <= support.widths)
    assert support.contains(np.array([[0.5, 0.25]])).all()
    assert not support.contains(np.array([[0.5, 0.75]])).any()


def test_empty_support():
    model = identity_model([[1.0, 1.0], [0.0, 0.0]])
    fields = exact_fields(model)
    assert identify_support([fields[(1, 0)], fields[(1, 1)]]).empty
