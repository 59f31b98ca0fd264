import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusiontrack.core import GaussianBelief, NotPositiveDefiniteError, Observation
from fusiontrack.filtering import (
    A_CV,
    H_SEL,
    MotionModel,
    NoiseSamples,
    NoiseSuite,
    ObservationModel,
    estimate_noise,
    initial_belief,
    innovation,
    predict,
    predict_observation,
    update,
)

from helpers import grid_bayes_marginal, random_spd


def _belief(mean=None, cov=None):
    return GaussianBelief(np.zeros(11) if mean is None else mean, np.zeros((11, 11)) if cov is None else cov)


def _obs_vec(v):
    v = np.array(v, dtype=float)
    v[4:7] = np.abs(v[4:7]) + 0.5
    v[3] = math.remainder(v[3], 2 * math.pi)
    return Observation.from_array(v)


def test_transition_and_selector_layout():
    for pos, vel in ((0, 7), (1, 8), (2, 9), (3, 10)):
        assert A_CV[pos, vel] == 1.0
    assert np.count_nonzero(A_CV - np.eye(11)) == 4
    np.testing.assert_array_equal(H_SEL @ H_SEL.T, np.eye(9))
    np.testing.assert_array_equal(H_SEL @ np.arange(11.0), np.arange(9.0))


def test_predict_examples():
    mean = np.zeros(11)
    mean[7] = 1.0
    out = predict(_belief(mean), MotionModel(np.zeros((11, 11))))
    assert out.mean[0] == 1.0
    still = np.arange(11.0) * 0.1
    still[7:] = 0.0
    np.testing.assert_array_equal(predict(_belief(still), MotionModel(np.zeros((11, 11)))).mean, still)
    out = predict(_belief(cov=np.eye(11)), MotionModel(np.eye(11)))
    np.testing.assert_allclose(out.cov, A_CV @ A_CV.T + np.eye(11), atol=1e-15)


def test_predict_wraps_heading():
    mean = np.zeros(11)
    mean[3], mean[10] = 3.0, 0.5
    out = predict(_belief(mean), MotionModel(np.zeros((11, 11))))
    assert out.mean[3] == pytest.approx(3.5 - 2 * math.pi)


def test_predict_is_linear_in_mean():
    rng = np.random.default_rng(0)
    model = MotionModel(np.diag(rng.uniform(0, 1, 11)))
    m1, m2 = rng.uniform(-0.2, 0.2, 11), rng.uniform(-0.2, 0.2, 11)
    a, b = 0.7, -1.3
    lhs = predict(_belief(a * m1 + b * m2), model).mean
    rhs = a * predict(_belief(m1), model).mean + b * predict(_belief(m2), model).mean
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_predict_observation_examples():
    mean = np.arange(11.0) * 0.1
    o_hat, S = predict_observation(_belief(mean), ObservationModel(np.eye(9)))
    np.testing.assert_array_equal(S, np.eye(9))
    np.testing.assert_array_equal(o_hat, mean[:9])
    _, S = predict_observation(_belief(cov=np.eye(11)), ObservationModel(np.zeros((9, 9))))
    np.testing.assert_allclose(S, np.eye(9), atol=1e-8)
    rng = np.random.default_rng(1)
    cov, R = random_spd(rng, 11), np.diag(rng.uniform(0.1, 1, 9))
    _, S = predict_observation(_belief(cov=cov), ObservationModel(R))
    np.testing.assert_allclose(S, H_SEL @ cov @ H_SEL.T + R, atol=1e-12)


def test_predict_observation_jitter_and_failure():
    # R = 0 is lifted by the jitter, so S is still factorizable
    _, S = predict_observation(_belief(), ObservationModel(np.zeros((9, 9))))
    assert np.all(np.diag(S) > 0)
    cov = np.zeros((11, 11))
    cov[2, 2] = -1.0
    with pytest.raises(NotPositiveDefiniteError) as info:
        predict_observation(_belief(cov=cov), ObservationModel(np.zeros((9, 9))))
    assert info.value.minor == 3


def test_update_scalar_analogue():
    o = np.zeros(9)
    o[0] = 2.0
    o[4:7] = 1.0
    mean = np.zeros(11)
    mean[4:7] = 1.0
    post = update(_belief(mean, np.eye(11)), Observation.from_array(o), ObservationModel(np.eye(9)))
    assert post.mean[0] == pytest.approx(1.0)
    assert post.cov[0, 0] == pytest.approx(0.5)


def test_update_zero_gain_limit():
    rng = np.random.default_rng(2)
    mean = rng.uniform(-1, 1, 11)
    mean[4:7] = 2.0
    post = update(_belief(mean, random_spd(rng, 11)), _obs_vec(rng.uniform(-3, 3, 9)),
                  ObservationModel(1e12 * np.eye(9)))
    np.testing.assert_allclose(post.mean, mean, atol=1e-6)


def test_update_wraps_heading_innovation():
    mean = np.zeros(11)
    mean[3], mean[4:7] = 3.1, 1.0
    o = np.zeros(9)
    o[3], o[4:7] = -3.1, 1.0
    post = update(_belief(mean, np.eye(11)), Observation.from_array(o), ObservationModel(np.eye(9)))
    # the short way round passes through pi, not through 0
    assert abs(abs(post.mean[3]) - math.pi) < 0.05
    resid = innovation(Observation.from_array(o), H_SEL @ mean)
    assert -math.pi < resid[3] <= math.pi
    assert resid[3] == pytest.approx(2 * math.pi - 6.2)


def test_update_matches_textbook_form():
    rng = np.random.default_rng(3)
    for _ in range(20):
        mean = rng.uniform(-1, 1, 11)
        mean[3] = rng.uniform(-1, 1)
        cov, R = random_spd(rng, 11), random_spd(rng, 9, 0.3)
        o = _obs_vec(H_SEL @ mean + rng.normal(0, 0.3, 9))
        post = update(_belief(mean, cov), o, ObservationModel(R))
        S = H_SEL @ cov @ H_SEL.T + R
        K = cov @ H_SEL.T @ np.linalg.inv(S)
        np.testing.assert_allclose(post.mean, mean + K @ (o.as_array() - H_SEL @ mean), atol=1e-9)
        np.testing.assert_allclose(post.cov, (np.eye(11) - K @ H_SEL) @ cov, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_update_matches_grid_bayes(seed):
    rng = np.random.default_rng(seed)
    mean = rng.uniform(-1, 1, 11)
    mean[4:7] = 2.0
    cov = random_spd(rng, 11, 0.5, 0.1)
    R = np.diag(rng.uniform(0.2, 1.0, 9))
    o = _obs_vec(H_SEL @ mean + rng.normal(0, 0.5, 9))
    post = update(_belief(mean, cov), o, ObservationModel(R))
    g_mean, g_cov = grid_bayes_marginal(mean, cov, o.as_array(), R, (0, 7))
    np.testing.assert_allclose(post.mean[[0, 7]], g_mean, atol=1e-2)
    np.testing.assert_allclose(post.cov[np.ix_([0, 7], [0, 7])], g_cov, atol=1e-2)


def test_random_interleavings_stay_psd():
    rng = np.random.default_rng(4)
    motion = MotionModel(np.diag(rng.uniform(1e-4, 0.5, 11)))
    obs_model = ObservationModel(np.diag(rng.uniform(1e-4, 0.5, 9)))
    b = _belief(np.r_[np.zeros(4), np.ones(3), np.zeros(4)], np.eye(11))
    for _ in range(1000):
        if rng.random() < 0.5:
            b = predict(b, motion)
        else:
            o = _obs_vec(H_SEL @ b.mean + rng.normal(0, 1, 9))
            prior_trace = np.trace(b.cov)
            b = update(b, o, obs_model)
            assert np.trace(b.cov) <= prior_trace + 1e-9
        assert np.max(np.abs(b.cov - b.cov.T)) <= 1e-9
        assert np.min(np.linalg.eigvalsh(b.cov)) >= -1e-8
        assert -math.pi < b.mean[3] <= math.pi


def test_models_reject_bad_covariances():
    with pytest.raises(ValueError):
        MotionModel(-np.eye(11))
    with pytest.raises(ValueError):
        ObservationModel(np.eye(8))


def test_noise_suite_roundtrip_and_checks():
    suite = NoiseSuite({"car": tuple(range(11))}, {"car": tuple(range(9))})
    assert NoiseSuite.from_dict(suite.to_dict()) == suite
    with pytest.raises(ValueError):
        NoiseSuite({"car": (1.0,) * 11}, {"bus": (1.0,) * 9})
    with pytest.raises(ValueError):
        NoiseSuite({"car": (-1.0,) + (1.0,) * 10}, {"car": (1.0,) * 9})
    with pytest.raises(KeyError):
        suite.motion("bus")


def test_initial_belief():
    suite = NoiseSuite({"car": tuple(np.arange(11) + 1.0)}, {"car": tuple(np.arange(9) + 0.5)})
    o = Observation(1, 2, 3, 0.1, 4, 2, 1.5, 0.2, 0.3)
    b = initial_belief(o, "car", suite)
    np.testing.assert_array_equal(b.mean[:9], o.as_array())
    assert b.mean[9] == 0 and b.mean[10] == 0
    np.testing.assert_array_equal(np.diag(b.cov), np.r_[np.arange(9) + 0.5, 100.0, 110.0])


def _cv_track(rng, n):
    s = np.r_[rng.uniform(0, 50, 2), 0.8, 0.2, 4.5, 1.9, 1.6, rng.uniform(-1, 1, 2), 0.0, 0.0]
    out = [s]
    for _ in range(n - 1):
        out.append(A_CV @ out[-1])
    return out


def test_estimate_noise_zero_cases():
    rng = np.random.default_rng(5)
    samples = NoiseSamples()
    for _ in range(5):
        states = _cv_track(rng, 10)
        for a, b in zip(states, states[1:]):
            samples.add_transition("car", a, b)
        for s in states:
            samples.add_detection("car", s, H_SEL @ s)
    suite = estimate_noise(samples)
    assert max(suite.q_diag["car"]) <= 1e-12
    assert max(suite.r_diag["car"]) <= 1e-12


def test_estimate_noise_names_short_classes():
    samples = NoiseSamples()
    samples.add_transition("car", np.zeros(11), np.zeros(11))
    samples.add_detection("car", np.zeros(11), np.zeros(9))
    with pytest.raises(ValueError, match="car"):
        estimate_noise(samples)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_estimated_r_tracks_injected(seed):
    rng = np.random.default_rng(seed)
    r_true = np.full(9, 0.25)
    samples = NoiseSamples()
    for _ in range(4):
        states = _cv_track(rng, 2)
        samples.add_transition("car", states[0], states[1])
    for _ in range(2000):
        s = _cv_track(rng, 1)[0]
        samples.add_detection("car", s, H_SEL @ s + rng.normal(0, np.sqrt(r_true)))
    est = np.array(estimate_noise(samples).r_diag["car"])
    assert np.all(np.abs(est / r_true - 1.0) < 0.2)
