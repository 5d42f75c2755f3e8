import json

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from scipy.integrate import quad

from chwave.profiles import (PiecewiseLinearProfile, ProfileError, accumulating_profile, eval_derivative,
                             h1_norm_sq, piecewise_linear, plateau_segments, rising_segments, steep_profile)


def test_half_breakpoints_and_slopes():
    p = accumulating_profile(0.5, 3)
    xs = p.breakpoints[1:]
    np.testing.assert_allclose(xs[:5], [0, 1, 2, 2.0625, 2.125], rtol=0, atol=1e-15)
    k = p.slopes[plateau_segments(3)]
    np.testing.assert_allclose(k[:3], [-0.5, -1.0, -2.0], rtol=1e-15)


@pytest.mark.parametrize("q", [0.3, 0.5, 0.8, 0.95])
def test_anchor_values(q):
    p = accumulating_profile(q, 4)
    assert p(0.0) == pytest.approx(q / 2, abs=1e-14)
    assert p.breakpoints[0] == pytest.approx(-2 / (1 - q**4))
    assert p(p.breakpoints[0]) == pytest.approx(0.0, abs=1e-14)
    assert p.end_values()[1] == pytest.approx(0.0, abs=1e-14)


def test_slope_pattern():
    q, J = 0.8, 6
    p = accumulating_profile(q, J)
    for j, si in enumerate(plateau_segments(J)):
        assert p.slopes[si] == pytest.approx(-1 / q ** (j - 1), rel=1e-14)
    for j, si in enumerate(rising_segments(J)):
        assert p.slopes[si] == pytest.approx(0.5 * (q + q**4) / q**j, rel=1e-14)
    # one plateau per j and a final connector
    assert p.n_segments == 1 + (2 * J + 1) + 1


def test_frozen_energies():
    # exact per-segment integration, values computed once and frozen
    assert h1_norm_sq(accumulating_profile(0.8, 6)) == pytest.approx(2.98929551780582, rel=1e-13)
    assert h1_norm_sq(accumulating_profile(0.5, 3)) == pytest.approx(0.5499964560252718, rel=1e-13)
    assert h1_norm_sq(piecewise_linear([(0, 0), (1, 1), (2, 0)])) == pytest.approx(8 / 3, rel=1e-15)


def test_h1_against_quadrature():
    p = accumulating_profile(0.7, 3)
    total = 0.0
    for a, b in zip(p.breakpoints[:-1], p.breakpoints[1:]):
        mid = 0.5 * (a + b)
        total += quad(lambda x: p(x) ** 2 + eval_derivative(p, mid) ** 2, a, b, epsabs=1e-14)[0]
    assert h1_norm_sq(p) == pytest.approx(total, rel=1e-12)


@pytest.mark.parametrize("q,J", [(0.0, 3), (1.0, 3), (-0.2, 3), (1.5, 2), (0.5, 0), (0.5, 2.5), (0.01, 10)])
def test_domain_errors(q, J):
    with pytest.raises(ProfileError):
        accumulating_profile(q, J)


def test_piecewise_linear_examples():
    hat = piecewise_linear([(0, 0), (1, 1), (2, 0)])
    np.testing.assert_array_equal(hat.slopes, [1.0, -1.0])
    zero = piecewise_linear([(0, 0), (1, 0)])
    assert zero(0.5) == 0.0 and zero(7.0) == 0.0
    with pytest.raises(ProfileError):
        piecewise_linear([(0, 0), (0, 1), (2, 0)])
    with pytest.raises(ProfileError):
        piecewise_linear([(0, 0), (1, 1)])
    with pytest.raises(ProfileError):
        piecewise_linear([(0, 1), (1, 0)])


def test_json_round_trip_is_exact():
    p = accumulating_profile(0.8, 6)
    r = PiecewiseLinearProfile.from_json(p.to_json())
    np.testing.assert_array_equal(r.breakpoints, p.breakpoints)
    np.testing.assert_array_equal(r.slopes, p.slopes)
    np.testing.assert_array_equal(r.intercepts, p.intercepts)
    assert set(json.loads(p.to_json())) == {"breakpoints", "slopes", "intercepts"}


def test_evaluation_outside_support_is_zero():
    p = accumulating_profile(0.8, 3)
    assert p(p.breakpoints[0] - 1) == 0.0
    assert p(p.breakpoints[-1] + 1) == 0.0
    assert eval_derivative(p, p.breakpoints[-1] + 1) == 0.0


@given(st.floats(0.05, 0.97), st.integers(1, 8))
def test_continuity_property(q, J):
    assume(q ** (4 * J) > 1e-12)
    p = accumulating_profile(q, J)
    scale = max(1.0, float(np.max(np.abs(p.slopes))) * float(np.max(np.abs(p.breakpoints))))
    assert np.max(np.abs(p.continuity_defects())) <= 1e-12 * scale
    assert np.all(np.diff(p.breakpoints) > 0)


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=8), st.lists(st.floats(0.05, 2), min_size=9, max_size=9))
def test_piecewise_linear_interpolates(us, dx):
    x = np.concatenate([[0.0], np.cumsum(dx[: len(us) + 1])])
    u = np.concatenate([[0.0], us, [0.0]])
    p = piecewise_linear(list(zip(x, u)))
    np.testing.assert_allclose(p(x), u, atol=1e-12 * (1 + np.abs(u).max()))
    assert np.max(np.abs(p.continuity_defects()), initial=0.0) <= 1e-12 * (1 + np.abs(u).max())


@pytest.mark.parametrize("slope,energy", [(-6.0, 1.0), (-10.0, 3.0), (-3.0, 0.5)])
def test_steep_profile(slope, energy):
    p = steep_profile(slope, energy)
    assert p.slopes.min() == slope
    assert h1_norm_sq(p) == pytest.approx(energy, rel=1e-12)
    # odd about the origin
    x = np.linspace(-1, 1, 101)
    np.testing.assert_allclose(p(-x), -p(x), atol=1e-14)


def test_steep_profile_rejects_low_energy():
    with pytest.raises(ProfileError):
        steep_profile(-6.0, 0.1, core=0.1)


@given(st.floats(0.5, 0.9), st.integers(1, 12), st.integers(1, 4))
def test_energy_increases_with_geometric_tail(q, J, k):
    assume(q ** (4 * (J + k)) >= 1e-13)
    a = h1_norm_sq(accumulating_profile(q, J))
    b = h1_norm_sq(accumulating_profile(q, J + k))
    assert 0 < b - a <= 2 * q ** (2 * J) / (1 - q * q)
