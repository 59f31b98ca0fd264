"""Distance matrices and gated greedy matching."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .core import ANGLE_INDEX, OBS_DIM, NotPositiveDefiniteError, cholesky, wrap_angles
from scipy.linalg import solve_triangular

DEFAULT_GATE = 11.0


@dataclass(frozen=True, eq=False)
class DistanceBundle:
    d_mah: np.ndarray
    d_feat: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    d_combined: np.ndarray

    def __post_init__(self):
        shapes = {m.shape for m in (self.d_mah, self.d_feat, self.alpha, self.beta, self.d_combined)}
        if len(shapes) != 1:
            raise ValueError(f"distance matrices disagree in shape: {sorted(shapes)}")
        if self.d_feat.size and not (np.all(self.d_feat > 0) and np.all(self.d_feat < 1)):
            raise ValueError("feature distances must lie in (0, 1)")


@dataclass
class MatchingResult:
    matches: List[Tuple[int, int, float]] = field(default_factory=list)
    unmatched_detections: List[int] = field(default_factory=list)
    unmatched_tracks: List[int] = field(default_factory=list)


def mahalanobis_matrix(observations: np.ndarray, predictions: Sequence[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """N x M matrix of sqrt(r^T S_m^-1 r) with the heading residual wrapped.

    ``observations`` is an (N, 9) array; ``predictions`` holds (o_hat, S) per track.
    """
    obs = np.asarray(observations, dtype=float).reshape(-1, OBS_DIM)
    out = np.zeros((obs.shape[0], len(predictions)))
    for m, (o_hat, S) in enumerate(predictions):
        try:
            L = cholesky(S, f"track {m}")
        except NotPositiveDefiniteError as exc:
            raise NotPositiveDefiniteError(exc.minor, f"innovation covariance of track {m}") from None
        resid = obs - np.asarray(o_hat, dtype=float)
        resid[:, ANGLE_INDEX] = wrap_angles(resid[:, ANGLE_INDEX])
        # ||L^-1 r||^2 == r^T S^-1 r
        white = solve_triangular(L, resid.T, lower=True)
        out[:, m] = np.sqrt(np.sum(white * white, axis=0))
    return out


def combine(d_mah, d_feat, alpha, beta) -> np.ndarray:
    """Mahalanobis distance corrected by the feature term: D = D_mah + alpha * (D_feat - (0.5 + beta))."""
    arrays = [np.asarray(a, dtype=float) for a in (d_mah, d_feat, alpha, beta)]
    if len({a.shape for a in arrays}) != 1:
        raise ValueError(f"shape mismatch: {[a.shape for a in arrays]}")
    d_mah, d_feat, alpha, beta = arrays
    return d_mah + alpha * (d_feat - (0.5 + beta))


def greedy_match(D: np.ndarray, gate: float = DEFAULT_GATE) -> MatchingResult:
    """Take pairs in ascending distance, skipping used rows/columns, up to the gate.

    Ties break by (distance, detection index, track index).
    """
    D = np.asarray(D, dtype=float)
    n_det, n_trk = D.shape
    result = MatchingResult()
    if D.size:
        det_idx, trk_idx = np.nonzero(D <= gate)
        dist = D[det_idx, trk_idx]
        order = np.lexsort((trk_idx, det_idx, dist))
        det_used = np.zeros(n_det, dtype=bool)
        trk_used = np.zeros(n_trk, dtype=bool)
        for k in order:
            n, m = det_idx[k], trk_idx[k]
            if det_used[n] or trk_used[m]:
                continue
            det_used[n] = trk_used[m] = True
            result.matches.append((int(n), int(m), float(dist[k])))
    matched_det = {n for n, _, _ in result.matches}
    matched_trk = {m for _, m, _ in result.matches}
    result.unmatched_detections = [n for n in range(n_det) if n not in matched_det]
    result.unmatched_tracks = [m for m in range(n_trk) if m not in matched_trk]
    return result
