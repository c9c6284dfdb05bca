import os

import hypothesis
import numpy as np
import pytest

from ivmqr.domain import ReferenceDomain, build_grid
from ivmqr.model import degenerate_model, example1_model, identity_model

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=100, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))


SHARES_09 = [[0.9, 0.1], [0.1, 0.9]]


@pytest.fixture
def square():
    return ReferenceDomain.cube(2)


@pytest.fixture
def square_grid(square):
    return build_grid(square, 20)


@pytest.fixture
def uniform_model():
    """Identity maps, 0.9/0.1 shares."""
    return identity_model(SHARES_09)


@pytest.fixture
def example1():
    return example1_model(np.eye(2), np.diag([1.0, 1.25]), compliance=0.9)


@pytest.fixture
def stretched():
    """Example-1 maps with A_1 = diag(1, 2)."""
    return example1_model(np.eye(2), np.diag([1.0, 2.0]), compliance=0.9)


@pytest.fixture
def degenerate():
    return degenerate_model()
