import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demotune.errors import InvalidConfigError, OutOfRangeError
from demotune.model import (
    C,
    Bounds,
    from_unbounded,
    observability_rank,
    step,
    system_matrices,
    to_unbounded,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_b_column_at_10_mps():
    _, B, _ = system_matrices(10.0, 0.3)
    expected = [100 * 0.3**4 / 24, 10 * 0.3**3 / 6, 0.5 * 0.3**2, 0.3]
    np.testing.assert_allclose(B, [0.03375, 0.045, 0.045, 0.3], rtol=1e-12)
    np.testing.assert_allclose(B, expected, rtol=1e-15)


def test_zero_speed_keeps_only_curvature_chain():
    A, B, Bz = system_matrices(0.0, 0.3)
    expected = np.eye(4)
    expected[2, 3] = 0.3
    np.testing.assert_array_equal(A, expected)
    np.testing.assert_array_equal(Bz, np.zeros(4))
    assert B[2] == pytest.approx(0.045) and B[0] == 0.0


def test_closed_form_entries():
    v, Ts = 25.0, 0.3
    A, B, Bz = system_matrices(v, Ts)
    assert A[0, 1] == pytest.approx(7.5)
    assert A[0, 2] == pytest.approx(0.5 * v**2 * Ts**2)
    assert A[0, 3] == pytest.approx(v**2 * Ts**3 / 6)
    assert A[1, 3] == pytest.approx(0.5 * v * Ts**2)
    assert Bz[0] == pytest.approx(-v * Ts)
    assert np.allclose(np.tril(A, -1), 0) and np.all(np.diag(A) == 1)


@pytest.mark.parametrize("Ts", [0.0, -0.1, math.inf, math.nan])
def test_bad_sample_time(Ts):
    with pytest.raises(InvalidConfigError):
        system_matrices(10.0, Ts)


def test_negative_speed_rejected():
    with pytest.raises(InvalidConfigError):
        system_matrices(-1.0, 0.3)


def test_step_from_rest_with_unit_input():
    np.testing.assert_allclose(step(np.zeros(4), 1.0, 10.0, 0.0, 0.3), [0.03375, 0.045, 0.045, 0.3])


@settings(max_examples=50, deadline=None)
@given(
    st.lists(finite, min_size=4, max_size=4),
    st.lists(finite, min_size=4, max_size=4),
    finite,
    finite,
    st.floats(0.0, 40.0),
    finite,
    finite,
)
def test_step_superposition(x1, x2, u1, u2, v, t1, t2):
    x1, x2 = np.array(x1), np.array(x2)
    lhs = step(x1 + x2, u1 + u2, v, t1 + t2, 0.3)
    rhs = step(x1, u1, v, t1, 0.3) + step(x2, u2, v, t2, 0.3) - step(np.zeros(4), 0.0, v, 0.0, 0.3)
    scale = 1.0 + np.max(np.abs(lhs))
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * scale


def test_c_maps_measurement_into_state():
    y = np.array([0.1, -0.2, 0.01])
    np.testing.assert_array_equal(C @ y, [0.1, -0.2, 0.01, 0.0])


def test_observability_full_rank_typical():
    assert observability_rank(25.0, 0.3) == 4


@pytest.mark.parametrize("v", [0.0, -3.0])
def test_observability_needs_positive_speed(v):
    with pytest.raises(InvalidConfigError):
        observability_rank(v, 0.3)


def test_transform_round_trip_example():
    assert to_unbounded(from_unbounded(1.3, 1e-6, 1e5), 1e-6, 1e5) == pytest.approx(1.3, abs=1e-9)


def test_transform_matches_tanh_form():
    t = np.linspace(-3, 3, 13)
    lo, hi = -2.0, 5.0
    expected = (hi - lo) / 2 * np.tanh(t) + (lo + hi) / 2
    np.testing.assert_allclose(from_unbounded(t, lo, hi), expected, rtol=1e-14, atol=1e-14)


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_transform_output_strictly_interior(t):
    p = from_unbounded(t, 1e-6, 1e5)
    assert 1e-6 < p < 1e5


def test_transform_elementwise_on_vectors():
    b = Bounds()
    t = np.array([0.0, 1.0, -1.0, 5.0, -5.0])
    p = from_unbounded(t, b.p_min, b.p_max)
    assert p.shape == (5,)
    for i in range(5):
        assert p[i] == from_unbounded(t[i], b.p_min[i], b.p_max[i])


@pytest.mark.parametrize("value", [1e-6, 1e5, 2e5, math.nan])
def test_to_unbounded_rejects_boundary_and_outside(value):
    with pytest.raises(OutOfRangeError):
        to_unbounded(value, 1e-6, 1e5)


def test_bounds_validation():
    with pytest.raises(InvalidConfigError):
        Bounds(u_min=0.1, u_max=0.1)
    with pytest.raises(InvalidConfigError):
        Bounds(x_min=[-1, -1, -1])
