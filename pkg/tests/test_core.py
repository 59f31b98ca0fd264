import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fusiontrack.core import (
    BoxState,
    ConfigMismatchError,
    Detection,
    GaussianBelief,
    NonFiniteMatrixError,
    NotPositiveDefiniteError,
    Observation,
    Track,
    chol_solve,
    cholesky,
    wrap_angle,
    wrap_angles,
)

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


def test_wrap_examples():
    assert wrap_angle(0.0) == 0.0
    assert wrap_angle(1.5 * math.pi) == pytest.approx(-0.5 * math.pi)
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(math.pi) == math.pi


@given(finite)
def test_wrap_range_and_congruence(theta):
    w = wrap_angle(theta)
    assert -math.pi < w <= math.pi
    k = (theta - w) / (2 * math.pi)
    assert abs(k - round(k)) < 1e-6


@given(finite)
def test_wrap_idempotent(theta):
    w = wrap_angle(theta)
    assert wrap_angle(w) == w


@given(st.lists(finite, min_size=1, max_size=20))
def test_wrap_vectorised_matches_scalar(values):
    vec = wrap_angles(np.array(values))
    for v, w in zip(values, vec):
        assert abs(wrap_angle(w - wrap_angle(v))) < 1e-9
        assert -math.pi < w <= math.pi


@pytest.mark.parametrize("bad", [math.inf, -math.inf, math.nan])
def test_wrap_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        wrap_angle(bad)
    with pytest.raises(ValueError):
        wrap_angles(np.array([0.0, bad]))


def test_chol_solve_examples():
    np.testing.assert_allclose(chol_solve(np.eye(2), np.array([3.0, 4.0])), [3.0, 4.0])
    np.testing.assert_allclose(chol_solve(np.diag([4.0, 1.0]), np.array([2.0, 1.0])), [0.5, 1.0])


@pytest.mark.parametrize("n", [1, 3, 6, 9, 11])
def test_chol_solve_recovers_x(n):
    rng = np.random.default_rng(n)
    for _ in range(20):
        M = rng.standard_normal((n, n))
        S = M @ M.T + 0.1 * np.eye(n)
        x = rng.standard_normal(n)
        got = chol_solve(S, S @ x)
        assert np.linalg.norm(got - x) <= 1e-8 * max(1.0, np.linalg.norm(x)) * np.linalg.cond(S) ** 0.5
        b = rng.standard_normal(n)
        assert np.linalg.norm(S @ chol_solve(S, b) - b) <= 1e-8 * np.linalg.norm(b) * max(1.0, np.linalg.norm(S))


def test_cholesky_names_failing_minor():
    S = np.diag([1.0, 2.0, -1.0, 4.0])
    with pytest.raises(NotPositiveDefiniteError) as info:
        cholesky(S, "demo")
    assert info.value.minor == 3
    assert "demo" in str(info.value) and "order 3" in str(info.value)
    with pytest.raises(np.linalg.LinAlgError):
        chol_solve(S, np.ones(4))


def test_cholesky_rejects_non_finite():
    S = np.eye(3)
    S[1, 1] = np.inf
    with pytest.raises(NonFiniteMatrixError):
        cholesky(S, "demo")
    S[1, 1] = np.nan
    with pytest.raises(np.linalg.LinAlgError):
        chol_solve(S, np.ones(3))


def _box(**kw):
    base = dict(x=1.0, y=2.0, z=0.5, a=0.3, l=4.0, w=2.0, h=1.5, d_x=0.1, d_y=0.0, d_z=0.0, d_a=0.0)
    base.update(kw)
    return base


def test_box_state_invariants():
    s = BoxState(**_box())
    assert BoxState.from_array(s.as_array()) == s
    with pytest.raises(ValueError):
        BoxState(**_box(l=0.0))
    with pytest.raises(ValueError):
        BoxState(**_box(a=-math.pi))
    BoxState(**_box(a=math.pi))
    with pytest.raises(ValueError):
        Observation.from_array(np.zeros(8))


def test_gaussian_belief_is_read_only_and_checked():
    b = GaussianBelief(np.zeros(11), np.eye(11))
    with pytest.raises(ValueError):
        b.mean[0] = 1.0
    b.check()
    bad = np.eye(11)
    bad[0, 1] = 1e-3
    with pytest.raises(ValueError):
        GaussianBelief(np.zeros(11), bad).check()
    with pytest.raises(ValueError):
        GaussianBelief(np.zeros(11), -np.eye(11)).check()
    with pytest.raises(ValueError):
        GaussianBelief(np.zeros(10), np.eye(11))


def _obs():
    return Observation(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0)


def test_detection_invariants():
    d = Detection(_obs(), "car", 0.7, np.zeros(16), np.zeros((8, 3, 3)), 0)
    d.check_dims(16, (8, 3, 3))
    with pytest.raises(ConfigMismatchError):
        d.check_dims(1030, (512, 3, 3))
    with pytest.raises(ValueError):
        Detection(_obs(), "car", 1.5, np.zeros(16), np.zeros((8, 3, 3)), 0)
    with pytest.raises(ValueError):
        Detection(_obs(), "car", 0.5, np.zeros((4, 4)), np.zeros((8, 3, 3)), 0)


def test_track_invariants():
    belief = GaussianBelief(np.zeros(11), np.eye(11))
    Track(1, "car", belief, None)
    with pytest.raises(ValueError):
        Track(1, "car", belief, None, hits=0)
    with pytest.raises(ValueError):
        Track(1, "car", belief, None, score=1.2)
