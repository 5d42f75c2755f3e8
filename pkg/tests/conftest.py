import warnings

import numpy as np
import pytest
from hypothesis import settings

from chwave.coords import EulerianState, ResolutionWarning, graded_grid, profile_knots, to_lagrangian
from chwave.profiles import piecewise_linear

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

# lines collected by the acceptance suite, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def lagrangian_of(profile, n=1024, margin=10.0):
    e = EulerianState.from_profile(profile)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ResolutionWarning)
        grid = graded_grid(profile_knots(e), n, margin)
        return to_lagrangian(e, grid)


@pytest.fixture
def hat():
    return piecewise_linear([(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)])


@pytest.fixture
def hat_state(hat):
    return lagrangian_of(hat, 1024)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
