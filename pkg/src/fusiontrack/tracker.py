"""Per-frame tracking loop: predict, associate, update, manage track life cycles."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .association import DEFAULT_GATE, combine, greedy_match, mahalanobis_matrix
from .core import ConfigMismatchError, Detection, Track
from .fileio import TrackRecord
from .filtering import NoiseSuite, initial_belief, predict, predict_observation, update
from .learned import TrackingNets
from .lifecycle import (
    LifecyclePolicy,
    decide_init,
    decide_terminate,
    is_confirmed,
    matched_score,
    missed_score,
    starts_confirmed,
)

MIN_REPORTED_SIZE = 1e-3


@dataclass
class AssociationContext:
    """What the association step saw for one class in one frame (for probes/training)."""

    frame: int
    class_id: str
    tracks: List[Track]  # posterior at the previous frame
    detections: List[Detection]
    d_mah: np.ndarray
    d_combined: np.ndarray
    fused_det: Optional[np.ndarray]


Probe = Callable[[AssociationContext], None]


class Tracker:
    """Single-sequence tracking state machine.

    Without ``nets`` association uses the Mahalanobis distance alone; with
    nets the combined distance is used and, under the learned policy, G4
    gates track creation.
    """

    def __init__(
        self,
        noise: NoiseSuite,
        policy: LifecyclePolicy = LifecyclePolicy(),
        gate: float = DEFAULT_GATE,
        nets: Optional[TrackingNets] = None,
        confidence_floor: float = 0.0,
    ):
        if policy.init_mode == "learned" and nets is None:
            raise ConfigMismatchError("the learned init policy needs trained networks")
        self.noise = noise
        self.policy = policy
        self.gate = gate
        self.nets = nets
        self.confidence_floor = confidence_floor
        self.tracks: List[Track] = []
        self.next_id = 1
        self.frame = -1

    def _fused(self, dets: Sequence[Detection]) -> np.ndarray:
        f3d = np.stack([d.feat3d for d in dets])
        if self.nets is None:
            return f3d
        for d in dets:
            d.check_dims(self.nets.dims.feat2d_dim, self.nets.dims.feat3d_shape)
        return self.nets.fuse(np.stack([d.feat2d for d in dets]), f3d)

    def _associate_class(self, cls: str, tracks: List[Track], dets: List[Detection], probe: Optional[Probe]):
        if cls not in self.noise.q_diag:
            raise ConfigMismatchError(f"no noise model for class {cls!r}")
        motion = self.noise.motion(cls)
        obs_model = self.noise.observation(cls)
        predicted = [replace(t, belief=predict(t.belief, motion)) for t in tracks]
        preds = [predict_observation(t.belief, obs_model) for t in predicted]
        obs = np.array([d.obs.as_array() for d in dets]).reshape(-1, 9)
        d_mah = mahalanobis_matrix(obs, preds)
        fused_det = self._fused(dets) if dets else None
        D = d_mah
        if self.nets is not None and dets and tracks:
            fused_trk = np.stack([t.fused_feat for t in tracks])
            d_feat = self.nets.feature_distance(fused_det, fused_trk)
            alpha, beta = self.nets.coefficients(fused_det, fused_trk)
            D = combine(d_mah, d_feat, alpha, beta)
        if probe is not None:
            probe(AssociationContext(self.frame, cls, tracks, dets, d_mah, D, fused_det))
        result = greedy_match(D, self.gate)

        survivors: List[Track] = []
        for n, m, _ in result.matches:
            det, trk = dets[n], predicted[m]
            upd = replace(
                trk,
                belief=update(trk.belief, det.obs, obs_model),
                hits=trk.hits + 1,
                consecutive_misses=0,
                score=matched_score(trk.score, det.confidence),
                fused_feat=fused_det[n],
                last_detection=det,
            )
            survivors.append(replace(upd, confirmed=is_confirmed(upd, self.policy)))
        for m in result.unmatched_tracks:
            trk = predicted[m]
            survivors.append(replace(trk, consecutive_misses=trk.consecutive_misses + 1, score=missed_score(trk.score)))

        unmatched = result.unmatched_detections
        scores = None
        if self.policy.init_mode == "learned":
            scores = self.nets.init_score(fused_det[unmatched]) if unmatched else np.zeros(0)
        for k in decide_init(len(unmatched), scores, self.policy):
            det = dets[unmatched[k]]
            survivors.append(Track(
                id=self.next_id,
                class_id=cls,
                belief=initial_belief(det.obs, cls, self.noise),
                fused_feat=fused_det[unmatched[k]],
                hits=1,
                consecutive_misses=0,
                score=det.confidence,
                confirmed=starts_confirmed(self.policy),
                last_detection=det,
            ))
            self.next_id += 1
        drop = set(decide_terminate(survivors, self.policy))
        return [t for t in survivors if t.id not in drop]

    def step(self, detections: Sequence[Detection], frame: Optional[int] = None,
             probe: Optional[Probe] = None) -> List[TrackRecord]:
        t = self.frame + 1
        if frame is not None and frame != t:
            raise ValueError(f"expected frame {t}, got frame {frame}")
        for d in detections:
            if d.frame != t:
                raise ValueError(f"detection stamped frame {d.frame} passed at frame {t}")
        self.frame = t
        dets = [d for d in detections if d.confidence >= self.confidence_floor]
        by_class: Dict[str, List[Detection]] = {}
        for d in dets:
            by_class.setdefault(d.class_id, []).append(d)
        classes = sorted(set(by_class) | {tr.class_id for tr in self.tracks})
        updated: List[Track] = []
        for cls in classes:
            tracks = [tr for tr in self.tracks if tr.class_id == cls]
            updated.extend(self._associate_class(cls, tracks, by_class.get(cls, []), probe))
        self.tracks = sorted(updated, key=lambda tr: tr.id)
        return [self._record(tr) for tr in self.tracks if tr.confirmed]

    def _record(self, track: Track) -> TrackRecord:
        state = np.array(track.belief.mean)
        state[4:7] = np.maximum(state[4:7], MIN_REPORTED_SIZE)
        return TrackRecord(self.frame, track.id, track.class_id, state, float(np.clip(track.score, 0.0, 1.0)))


def run_sequence(
    frames: Sequence[Sequence[Detection]],
    noise: NoiseSuite,
    policy: LifecyclePolicy = LifecyclePolicy(),
    gate: float = DEFAULT_GATE,
    nets: Optional[TrackingNets] = None,
    confidence_floor: float = 0.0,
    probe: Optional[Probe] = None,
) -> List[TrackRecord]:
    """Track a whole frame-ordered detection stream."""
    tracker = Tracker(noise, policy, gate, nets, confidence_floor)
    records: List[TrackRecord] = []
    for t, dets in enumerate(frames):
        try:
            records.extend(tracker.step(dets, frame=t, probe=probe))
        except (ConfigMismatchError, np.linalg.LinAlgError):
            raise
        except ValueError as exc:
            raise ValueError(f"frame {t}: {exc}") from exc
    return records
