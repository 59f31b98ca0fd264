"""Kalman prediction/update for the 11-dim box state and noise estimation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .core import (
    ANGLE_INDEX,
    OBS_DIM,
    STATE_DIM,
    GaussianBelief,
    NotPositiveDefiniteError,
    Observation,
    chol_solve,
    cholesky,
    symmetrize,
    wrap_angle,
    wrap_angles,
)

# jitter added to R's diagonal when it is not positive definite
R_JITTER = 1e-9


def transition_matrix() -> np.ndarray:
    """Constant linear/angular velocity model: position and heading advance by their deltas."""
    A = np.eye(STATE_DIM)
    for pos, vel in ((0, 7), (1, 8), (2, 9), (3, 10)):
        A[pos, vel] = 1.0
    return A


def observation_matrix() -> np.ndarray:
    """Selects (x, y, z, a, l, w, h, d_x, d_y) from the state."""
    H = np.zeros((OBS_DIM, STATE_DIM))
    H[np.arange(OBS_DIM), np.arange(OBS_DIM)] = 1.0
    return H


A_CV = transition_matrix()
H_SEL = observation_matrix()


def _check_psd(M: np.ndarray, name: str, tol: float = 1e-9) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if np.max(np.abs(M - M.T), initial=0.0) > tol:
        raise ValueError(f"{name} is not symmetric")
    if M.size and np.min(np.linalg.eigvalsh(M)) < -tol:
        raise ValueError(f"{name} is not positive semidefinite")
    return M


@dataclass(frozen=True, eq=False)
class MotionModel:
    Q: np.ndarray
    A: np.ndarray = field(default_factory=lambda: A_CV.copy())

    def __post_init__(self):
        Q = _check_psd(self.Q, "Q")
        if Q.shape != (STATE_DIM, STATE_DIM):
            raise ValueError(f"Q must be {STATE_DIM}x{STATE_DIM}")
        object.__setattr__(self, "Q", Q)


@dataclass(frozen=True, eq=False)
class ObservationModel:
    R: np.ndarray
    H: np.ndarray = field(default_factory=lambda: H_SEL.copy())

    def __post_init__(self):
        R = _check_psd(self.R, "R")
        if R.shape != (OBS_DIM, OBS_DIM):
            raise ValueError(f"R must be {OBS_DIM}x{OBS_DIM}")
        object.__setattr__(self, "R", R)


@dataclass(frozen=True)
class NoiseSuite:
    """Per-class diagonal process (11) and observation (9) noise variances."""

    q_diag: Dict[str, Tuple[float, ...]]
    r_diag: Dict[str, Tuple[float, ...]]

    def __post_init__(self):
        if set(self.q_diag) != set(self.r_diag):
            raise ValueError("Q and R must cover the same classes")
        for cls in self.q_diag:
            if len(self.q_diag[cls]) != STATE_DIM or len(self.r_diag[cls]) != OBS_DIM:
                raise ValueError(f"wrong diagonal length for class {cls!r}")
            if min(self.q_diag[cls]) < 0 or min(self.r_diag[cls]) < 0:
                raise ValueError(f"negative variance for class {cls!r}")

    @property
    def classes(self) -> List[str]:
        return sorted(self.q_diag)

    def motion(self, class_id: str) -> MotionModel:
        if class_id not in self.q_diag:
            raise KeyError(f"no noise entry for class {class_id!r}")
        return MotionModel(np.diag(self.q_diag[class_id]))

    def observation(self, class_id: str) -> ObservationModel:
        if class_id not in self.r_diag:
            raise KeyError(f"no noise entry for class {class_id!r}")
        return ObservationModel(np.diag(self.r_diag[class_id]))

    def to_dict(self) -> dict:
        return {
            cls: {"Q": list(self.q_diag[cls]), "R": list(self.r_diag[cls])}
            for cls in self.classes
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSuite":
        return cls(
            q_diag={k: tuple(float(x) for x in v["Q"]) for k, v in data.items()},
            r_diag={k: tuple(float(x) for x in v["R"]) for k, v in data.items()},
        )


def predict(belief: GaussianBelief, model: MotionModel) -> GaussianBelief:
    A = model.A
    mean = A @ belief.mean
    mean[ANGLE_INDEX] = wrap_angle(mean[ANGLE_INDEX])
    cov = symmetrize(A @ belief.cov @ A.T + model.Q)
    return GaussianBelief(mean, cov)


def _regularized_R(R: np.ndarray) -> np.ndarray:
    try:
        cholesky(R)
        return R
    except NotPositiveDefiniteError:
        return R + R_JITTER * np.eye(R.shape[0])


def predict_observation(belief: GaussianBelief, model: ObservationModel) -> Tuple[np.ndarray, np.ndarray]:
    """Predicted observation vector and innovation covariance S."""
    H = model.H
    o_hat = H @ belief.mean
    S = symmetrize(H @ belief.cov @ H.T + _regularized_R(model.R))
    cholesky(S, "innovation covariance")  # raises if singular even after jitter
    return o_hat, S


def innovation(o, o_hat: np.ndarray) -> np.ndarray:
    z = o.as_array() if isinstance(o, Observation) else np.asarray(o, dtype=float)
    resid = z - o_hat
    resid[ANGLE_INDEX] = wrap_angle(resid[ANGLE_INDEX])
    return resid


def update(belief: GaussianBelief, o, model: ObservationModel) -> GaussianBelief:
    """Kalman update in Joseph form; the heading innovation is wrapped."""
    H = model.H
    R = _regularized_R(model.R)
    o_hat, S = predict_observation(belief, model)
    resid = innovation(o, o_hat)
    PHt = belief.cov @ H.T
    # K = P H^T S^-1, via S K^T = H P
    K = chol_solve(S, PHt.T, "innovation covariance").T
    mean = belief.mean + K @ resid
    mean[ANGLE_INDEX] = wrap_angle(mean[ANGLE_INDEX])
    I_KH = np.eye(STATE_DIM) - K @ H
    cov = symmetrize(I_KH @ belief.cov @ I_KH.T + K @ R @ K.T)
    return GaussianBelief(mean, cov)


def initial_belief(o: Observation, class_id: str, noise: NoiseSuite) -> GaussianBelief:
    """New-track belief: mean from the detection with zero d_z/d_a.

    Observed slots take R's variances; d_z and d_a take 10x their process variance.
    """
    mean = np.zeros(STATE_DIM)
    mean[:OBS_DIM] = o.as_array()
    var = np.zeros(STATE_DIM)
    var[:OBS_DIM] = noise.r_diag[class_id]
    q = noise.q_diag[class_id]
    var[9] = 10.0 * q[9]
    var[10] = 10.0 * q[10]
    return GaussianBelief(mean, np.diag(var))


@dataclass
class NoiseSamples:
    """Per-class residual collections feeding :func:`estimate_noise`."""

    process: Dict[str, List[np.ndarray]] = field(default_factory=dict)
    observation: Dict[str, List[np.ndarray]] = field(default_factory=dict)

    def add_transition(self, class_id: str, s_prev: np.ndarray, s_next: np.ndarray) -> None:
        resid = np.asarray(s_next, dtype=float) - A_CV @ np.asarray(s_prev, dtype=float)
        resid[ANGLE_INDEX] = wrap_angle(resid[ANGLE_INDEX])
        self.process.setdefault(class_id, []).append(resid)

    def add_detection(self, class_id: str, state: np.ndarray, obs: np.ndarray) -> None:
        resid = np.asarray(obs, dtype=float) - H_SEL @ np.asarray(state, dtype=float)
        resid[ANGLE_INDEX] = wrap_angle(resid[ANGLE_INDEX])
        self.observation.setdefault(class_id, []).append(resid)


def collect_samples(
    sequences: Iterable[Tuple[Sequence[Dict[int, Tuple[str, np.ndarray]]], Sequence[Sequence[Tuple[int, np.ndarray]]]]],
) -> NoiseSamples:
    """Gather residuals from labelled sequences.

    Each sequence is ``(gt_frames, matches)``: ``gt_frames[t]`` maps identity to
    ``(class_id, state11)``; ``matches[t]`` lists ``(identity, obs9)`` for detections
    matched to ground truth at frame t.
    """
    samples = NoiseSamples()
    for gt_frames, matches in sequences:
        for t in range(len(gt_frames) - 1):
            for gid, (cls, state) in gt_frames[t].items():
                nxt = gt_frames[t + 1].get(gid)
                if nxt is not None:
                    samples.add_transition(cls, state, nxt[1])
        for t, frame_matches in enumerate(matches):
            for gid, obs in frame_matches:
                cls, state = gt_frames[t][gid]
                samples.add_detection(cls, state, obs)
    return samples


def estimate_noise(samples: NoiseSamples) -> NoiseSuite:
    """Diagonal Q and R per class from empirical residual variances."""
    classes = sorted(set(samples.process) | set(samples.observation))
    short = [
        c for c in classes
        if len(samples.process.get(c, ())) < 2 or len(samples.observation.get(c, ())) < 2
    ]
    if short:
        raise ValueError(f"fewer than 2 noise samples for classes: {', '.join(short)}")
    q, r = {}, {}
    for c in classes:
        proc = np.vstack(samples.process[c])
        obs = np.vstack(samples.observation[c])
        q[c] = tuple(float(v) for v in proc.var(axis=0))
        r[c] = tuple(float(v) for v in obs.var(axis=0))
    return NoiseSuite(q, r)


__all__ = [
    "A_CV",
    "H_SEL",
    "MotionModel",
    "NoiseSamples",
    "NoiseSuite",
    "ObservationModel",
    "collect_samples",
    "estimate_noise",
    "initial_belief",
    "innovation",
    "predict",
    "predict_observation",
    "update",
    "wrap_angles",
]
