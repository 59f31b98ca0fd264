"""CLEAR-MOT style counting with MOTA, MOTAR and AMOTA.

Boxes match by 2D center distance on the ground plane (gate 2 m). Within a
frame, pairings that continue a ground-truth identity's previous track id
are kept first; the rest are matched greedily by distance. An identity
switch is counted whenever a ground-truth identity is matched to a different
track id than in its most recent matched frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .fileio import GtBox, TrackRecord

MATCH_GATE = 2.0
N_SAMPLE_POINTS = 40


@dataclass
class FrameCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    gt_positives: int = 0

    def __iadd__(self, other: "FrameCounts") -> "FrameCounts":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.ids += other.ids
        self.gt_positives += other.gt_positives
        return self


@dataclass(frozen=True)
class RecallPoint:
    r: float
    threshold: Optional[float]
    motar: float


def match_frame(
    gt_ids: Sequence[int],
    gt_xy: np.ndarray,
    hyp_ids: Sequence[int],
    hyp_xy: np.ndarray,
    previous: Dict[int, int],
    gate: float = MATCH_GATE,
) -> Tuple[FrameCounts, List[Tuple[int, int]]]:
    """Count one frame of one class. ``previous`` (gt id -> track id) is updated in place.

    Returns the counts and the matched (gt id, track id) pairs.
    """
    gt_xy = np.asarray(gt_xy, dtype=float).reshape(-1, 2)
    hyp_xy = np.asarray(hyp_xy, dtype=float).reshape(-1, 2)
    n_gt, n_hyp = len(gt_ids), len(hyp_ids)
    pairs: List[Tuple[int, int]] = []
    if n_gt and n_hyp:
        dist = np.linalg.norm(gt_xy[:, None, :] - hyp_xy[None, :, :], axis=2)
        gt_used = np.zeros(n_gt, dtype=bool)
        hyp_used = np.zeros(n_hyp, dtype=bool)
        hyp_index = {h: j for j, h in enumerate(hyp_ids)}
        carried = []
        for i, g in enumerate(gt_ids):
            j = hyp_index.get(previous.get(g, None), None)
            if j is not None and dist[i, j] <= gate:
                carried.append((dist[i, j], i, j))
        for _, i, j in sorted(carried):
            if not gt_used[i] and not hyp_used[j]:
                gt_used[i] = hyp_used[j] = True
                pairs.append((i, j))
        gi, hj = np.nonzero(dist <= gate)
        order = np.lexsort((hj, gi, dist[gi, hj]))
        for k in order:
            i, j = gi[k], hj[k]
            if not gt_used[i] and not hyp_used[j]:
                gt_used[i] = hyp_used[j] = True
                pairs.append((int(i), int(j)))
    counts = FrameCounts(tp=len(pairs), fp=n_hyp - len(pairs), fn=n_gt - len(pairs), gt_positives=n_gt)
    matched = []
    for i, j in pairs:
        g, h = gt_ids[i], hyp_ids[j]
        if g in previous and previous[g] != h:
            counts.ids += 1
        previous[g] = h
        matched.append((g, h))
    return counts, matched


def mota(counts: FrameCounts) -> float:
    if counts.gt_positives <= 0:
        raise ValueError("MOTA is undefined without ground-truth positives")
    return 1.0 - (counts.ids + counts.fp + counts.fn) / counts.gt_positives


def motar(counts: FrameCounts, r: float, gt_positives: Optional[int] = None) -> float:
    """Recall-normalised MOTA at recall ``r``, clamped to [0, 1].

    The upper clamp matters when the achieved recall overshoots ``r``: the
    surplus true positives would otherwise push the value above one.
    """
    if not 0.0 < r <= 1.0:
        raise ValueError(f"recall {r} outside (0, 1]")
    p = counts.gt_positives if gt_positives is None else gt_positives
    if p <= 0:
        raise ValueError("MOTAR is undefined without ground-truth positives")
    err = counts.ids + counts.fp + counts.fn - (1.0 - r) * p
    return min(1.0, max(0.0, 1.0 - err / (r * p)))


# sequence-level evaluation ---------------------------------------------------

@dataclass
class _ClassFrames:
    gt_ids: List[np.ndarray]
    gt_xy: List[np.ndarray]
    hyp_ids: List[np.ndarray]
    hyp_xy: List[np.ndarray]
    hyp_score: List[np.ndarray]


def _split_class(gt_frames: Sequence[Sequence[GtBox]], tracks: Iterable[TrackRecord], cls: str,
                 n_frames: int) -> _ClassFrames:
    hyps: List[List[TrackRecord]] = [[] for _ in range(n_frames)]
    for r in tracks:
        if r.class_id == cls:
            if not 0 <= r.frame < n_frames:
                raise ValueError(f"track record at frame {r.frame} outside the {n_frames}-frame sequence")
            hyps[r.frame].append(r)
    out = _ClassFrames([], [], [], [], [])
    for t in range(n_frames):
        gts = [b for b in gt_frames[t] if b.class_id == cls]
        out.gt_ids.append(np.array([b.id for b in gts], dtype=int))
        out.gt_xy.append(np.array([b.state[:2] for b in gts]).reshape(-1, 2))
        out.hyp_ids.append(np.array([r.id for r in hyps[t]], dtype=int))
        out.hyp_xy.append(np.array([r.state[:2] for r in hyps[t]]).reshape(-1, 2))
        out.hyp_score.append(np.array([r.score for r in hyps[t]], dtype=float))
    return out


def _count_sequence(frames: _ClassFrames, threshold: Optional[float], gate: float):
    total = FrameCounts()
    previous: Dict[int, int] = {}
    matched_tracks = set()
    for t in range(len(frames.gt_ids)):
        keep = slice(None) if threshold is None else frames.hyp_score[t] >= threshold
        ids = frames.hyp_ids[t][keep]
        counts, pairs = match_frame(frames.gt_ids[t].tolist(), frames.gt_xy[t], ids.tolist(),
                                    frames.hyp_xy[t][keep], previous, gate)
        total += counts
        matched_tracks.update(h for _, h in pairs)
    return total, matched_tracks


def count_sequence(gt_frames, tracks, cls: str, threshold: Optional[float] = None, gate: float = MATCH_GATE):
    """Totals over a sequence for boxes scoring at least ``threshold`` (all boxes when None)."""
    frames = _split_class(gt_frames, tracks, cls, len(gt_frames))
    return _count_sequence(frames, threshold, gate)[0]


@dataclass
class ClassReport:
    class_id: str
    amota: float
    mota: float
    mota_threshold: Optional[float]
    counts: FrameCounts
    recall_points: List[RecallPoint]
    n_tracks: int
    n_false_tracks: int

    def to_dict(self) -> dict:
        return {
            "amota": self.amota,
            "mota": self.mota,
            "mota_threshold": self.mota_threshold,
            "counts": self.counts.__dict__,
            "recall_points": [p.__dict__ for p in self.recall_points],
            "n_tracks": self.n_tracks,
            "n_false_tracks": self.n_false_tracks,
        }


def evaluate_class(gt_frames, tracks, cls: str, n_points: int = N_SAMPLE_POINTS,
                   gate: float = MATCH_GATE) -> ClassReport:
    """AMOTA over recalls {1, 2, ..., n-1}/(n-1) by sweeping the score threshold downwards.

    For each recall point the highest threshold achieving at least that
    recall is used; unreachable points score MOTAR 0.
    """
    tracks = list(tracks)
    frames = _split_class(gt_frames, tracks, cls, len(gt_frames))
    full, matched = _count_sequence(frames, None, gate)
    P = full.gt_positives
    if P == 0:
        raise ValueError(f"no ground truth for class {cls!r}")
    steps = n_points - 1
    scores = np.concatenate(frames.hyp_score) if frames.hyp_score else np.zeros(0)
    thresholds = np.unique(scores)[::-1]
    chosen: Dict[int, Tuple[float, FrameCounts]] = {}
    best_mota, best_thr = mota(FrameCounts(fn=P, gt_positives=P)), None
    for thr in thresholds:
        counts, _ = _count_sequence(frames, float(thr), gate)
        value = mota(counts)
        if value > best_mota:
            best_mota, best_thr = value, float(thr)
        for k in range(1, steps + 1):
            # achieved recall >= k/steps, in exact integer arithmetic
            if k not in chosen and counts.tp * steps >= k * P:
                chosen[k] = (float(thr), counts)
    points = []
    for k in range(1, steps + 1):
        r = k / steps
        if k in chosen:
            thr, counts = chosen[k]
            points.append(RecallPoint(r, thr, motar(counts, r, P)))
        else:
            points.append(RecallPoint(r, None, 0.0))
    track_ids = {r.id for r in tracks if r.class_id == cls}
    return ClassReport(
        class_id=cls,
        amota=float(np.mean([p.motar for p in points])),
        mota=best_mota,
        mota_threshold=best_thr,
        counts=full,
        recall_points=points,
        n_tracks=len(track_ids),
        n_false_tracks=len(track_ids - matched),
    )


def amota(gt_frames, tracks, cls: str, n_points: int = N_SAMPLE_POINTS, gate: float = MATCH_GATE) -> float:
    return evaluate_class(gt_frames, tracks, cls, n_points, gate).amota


@dataclass
class EvaluationReport:
    classes: Dict[str, ClassReport] = field(default_factory=dict)

    @property
    def amota(self) -> float:
        """Unweighted mean over classes."""
        return float(np.mean([c.amota for c in self.classes.values()]))

    @property
    def mota(self) -> float:
        return float(np.mean([c.mota for c in self.classes.values()]))

    @property
    def id_switches(self) -> int:
        return sum(c.counts.ids for c in self.classes.values())

    @property
    def false_tracks(self) -> int:
        return sum(c.n_false_tracks for c in self.classes.values())

    def to_dict(self) -> dict:
        return {
            "format": "fusiontrack-metrics/1",
            "overall": {
                "amota": self.amota,
                "mota": self.mota,
                "id_switches": self.id_switches,
                "false_tracks": self.false_tracks,
            },
            "classes": {k: v.to_dict() for k, v in sorted(self.classes.items())},
        }


def evaluate(gt_frames, tracks, classes: Optional[Sequence[str]] = None,
             n_points: int = N_SAMPLE_POINTS, gate: float = MATCH_GATE) -> EvaluationReport:
    tracks = list(tracks)
    if classes is None:
        classes = sorted({b.class_id for frame in gt_frames for b in frame})
    if not classes:
        raise ValueError("ground truth is empty")
    report = EvaluationReport()
    for cls in classes:
        report.classes[cls] = evaluate_class(gt_frames, tracks, cls, n_points, gate)
    return report
