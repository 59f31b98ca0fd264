"""Two-stage training of the distance networks and training of the init gate.

Training pairs come from running the Mahalanobis-only tracker (always-init)
over labelled scenarios and recording, per frame and class, the tracks from
the previous frame, the new detections and the Mahalanobis matrix. Each
recorded frame is one batch.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .association import greedy_match
from .filtering import NoiseSamples, NoiseSuite, collect_samples, estimate_noise
from .fileio import GtBox
from .learned import (
    LossConstants,
    TrackingNets,
    bce,
    bce_grad,
    coef_forward,
    feature_distance,
    fuse,
    init_score,
    init_targets,
    label_pairs,
    pair_grad,
    separated_fraction,
    stage2_loss,
)
from .lifecycle import LifecyclePolicy
from .neuralnet import Adam, backward
from .tracker import AssociationContext, run_sequence

log = logging.getLogger(__name__)


@dataclass
class FrameSample:
    """One association batch: N detections at t against M tracks from t-1."""

    class_id: str
    det_f2d: np.ndarray
    det_f3d: np.ndarray
    trk_f2d: np.ndarray
    trk_f3d: np.ndarray
    d_mah: np.ndarray
    K: np.ndarray
    init_target: np.ndarray


@dataclass
class LabeledSequence:
    gt: Sequence[Sequence[GtBox]]
    detections: Sequence[Sequence]


def _gt_arrays(frame: Sequence[GtBox], cls: str):
    boxes = [b for b in frame if b.class_id == cls]
    return np.array([b.id for b in boxes], dtype=int), np.array([b.state[:2] for b in boxes]).reshape(-1, 2)


def collect_frame_samples(seq: LabeledSequence, noise: NoiseSuite, gate: float = 11.0) -> List[FrameSample]:
    samples: List[FrameSample] = []

    def probe(ctx: AssociationContext) -> None:
        t, cls = ctx.frame, ctx.class_id
        if not ctx.detections:
            return
        gt_ids, gt_xy = _gt_arrays(seq.gt[t], cls)
        det_xy = np.array([[d.obs.x, d.obs.y] for d in ctx.detections])
        target = init_targets(det_xy, gt_xy)
        dets = ctx.detections
        srcs = [trk.last_detection for trk in ctx.tracks]
        if ctx.tracks:
            prev_ids, prev_xy = _gt_arrays(seq.gt[t - 1], cls)
            trk_xy = np.array([trk.belief.mean[:2] for trk in ctx.tracks])
            K = label_pairs(trk_xy, det_xy, prev_ids, prev_xy, gt_ids, gt_xy)
            trk_f2d = np.stack([s.feat2d for s in srcs])
            trk_f3d = np.stack([s.feat3d for s in srcs])
        else:
            K = np.ones((len(dets), 0), dtype=np.int8)
            trk_f2d = np.zeros((0,) + dets[0].feat2d.shape)
            trk_f3d = np.zeros((0,) + dets[0].feat3d.shape)
        samples.append(FrameSample(
            class_id=cls,
            det_f2d=np.stack([d.feat2d for d in dets]),
            det_f3d=np.stack([d.feat3d for d in dets]),
            trk_f2d=trk_f2d,
            trk_f3d=trk_f3d,
            d_mah=np.array(ctx.d_mah),
            K=K,
            init_target=target,
        ))

    run_sequence(seq.detections, noise, LifecyclePolicy("always"), gate, None, probe=probe)
    return samples


def noise_from_scenarios(scenarios) -> NoiseSuite:
    """Estimate the per-class noise suite from simulator scenarios (exact detection/gt pairing)."""
    samples = NoiseSamples()
    for sc in scenarios:
        states: Dict[int, tuple] = {}
        for t, frame in enumerate(sc.gt):
            current = {b.id: b for b in frame}
            for gid, box in current.items():
                prev = states.get(gid)
                if prev is not None and prev[0] == t - 1:
                    samples.add_transition(box.class_id, prev[1].state, box.state)
                states[gid] = (t, box)
            for det, gid in zip(sc.detections[t], sc.det_truth[t]):
                if gid >= 0:
                    samples.add_detection(det.class_id, current[gid].state, det.obs.as_array())
    return estimate_noise(samples)


def match_detections_to_gt(gt_frames, det_frames, radius: float = 2.0):
    """Nearest-center pairing of detections to same-class ground truth, for file inputs."""
    matches = []
    for gts, dets in zip(gt_frames, det_frames):
        frame_matches = []
        for cls in sorted({b.class_id for b in gts}):
            g = [b for b in gts if b.class_id == cls]
            d = [x for x in dets if x.class_id == cls]
            if not g or not d:
                continue
            gxy = np.array([b.state[:2] for b in g])
            dxy = np.array([[x.obs.x, x.obs.y] for x in d])
            dist = np.linalg.norm(dxy[:, None, :] - gxy[None, :, :], axis=2)
            for n, m, _ in greedy_match(dist, radius).matches:
                frame_matches.append((g[m].id, d[n].obs.as_array()))
        matches.append(frame_matches)
    return matches


def noise_from_files(sequences) -> NoiseSuite:
    """Noise suite from (gt_frames, det_frames) pairs read from disk.

    Without simulator truth, detections are paired with ground truth by
    nearest center within the 2 m match radius.
    """
    labelled = []
    for gt_frames, det_frames in sequences:
        gt_maps = [{b.id: (b.class_id, b.state) for b in frame} for frame in gt_frames]
        labelled.append((gt_maps, match_detections_to_gt(gt_frames, det_frames)))
    return estimate_noise(collect_samples(labelled))


# metrics -------------------------------------------------------------------

def pair_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """ROC AUC for scores predicting label 1 (rank statistic, ties averaged)."""
    scores, labels = np.asarray(scores, dtype=float).ravel(), np.asarray(labels).ravel()
    n_pos, n_neg = int(np.sum(labels == 1)), int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# training loops ------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 10
    seed: int = 0
    loss: LossConstants = field(default_factory=LossConstants)
    checkpoint_dir: Optional[str] = None


@dataclass
class Telemetry:
    records: List[dict] = field(default_factory=list)
    sink: Optional[Callable[[dict], None]] = None

    def emit(self, **record) -> None:
        self.records.append(record)
        log.info("%s", record)
        if self.sink is not None:
            self.sink(record)

    def stage(self, name: str) -> List[dict]:
        return [r for r in self.records if r["stage"] == name]


def _pair_samples(samples: Sequence[FrameSample]) -> List[FrameSample]:
    return [s for s in samples if s.K.size]


def _fused_pair(nets: TrackingNets, s: FrameSample):
    n = len(s.det_f2d)
    fused, tape = fuse(nets, np.concatenate([s.det_f2d, s.trk_f2d]), np.concatenate([s.det_f3d, s.trk_f3d]))
    return fused[:n], fused[n:], tape


def evaluate_stage1(nets: TrackingNets, samples: Sequence[FrameSample]):
    losses, scores, labels = [], [], []
    for s in _pair_samples(samples):
        fd, ft, _ = _fused_pair(nets, s)
        d, _ = feature_distance(nets, fd, ft)
        losses.append(bce(d, s.K) * s.K.size)
        scores.append(d.ravel())
        labels.append(s.K.ravel())
    total = sum(x.size for x in labels)
    scores, labels = np.concatenate(scores), np.concatenate(labels)
    return float(np.sum(losses) / total), pair_auc(scores, labels)


def stage1_batch(nets: TrackingNets, s: FrameSample) -> float:
    """Pair BCE on one frame; leaves fresh G1/G2 gradients in the parameter stores."""
    n, m = s.K.shape
    for k in ("g1", "g2"):
        nets.params[k].zero_grad()
    fd, ft, tape1 = _fused_pair(nets, s)
    d, tape2 = feature_distance(nets, fd, ft)
    g_pairs = backward(nets.nets["g2"], nets.params["g2"], tape2, bce_grad(d, s.K).reshape(-1, 1))
    g_det, g_trk = pair_grad(g_pairs, n, m)
    backward(nets.nets["g1"], nets.params["g1"], tape1, np.concatenate([g_det, g_trk]))
    return bce(d, s.K)


def train_stage1(nets: TrackingNets, samples: Sequence[FrameSample], cfg: TrainConfig, telemetry: Telemetry) -> None:
    """Train G1 and G2 on pair classification."""
    batches = _pair_samples(samples)
    if not any(np.any(s.K == 0) for s in batches):
        raise ValueError("no positive (matched) pairs in the training data")
    rng = np.random.default_rng(cfg.seed)
    opt = {k: Adam(cfg.lr) for k in ("g1", "g2")}
    loss, auc = evaluate_stage1(nets, batches)
    telemetry.emit(stage="stage1", epoch=0, loss=loss, auc=auc)
    for epoch in range(1, cfg.epochs + 1):
        for i in rng.permutation(len(batches)):
            stage1_batch(nets, batches[i])
            for k in ("g1", "g2"):
                opt[k].step(nets.params[k])
        loss, auc = evaluate_stage1(nets, batches)
        telemetry.emit(stage="stage1", epoch=epoch, loss=loss, auc=auc)
        _checkpoint(nets, cfg, f"_stage1_epoch{epoch:02d}")


@dataclass
class Stage2Batch:
    fd: np.ndarray
    ft: np.ndarray
    d_feat: np.ndarray
    d_mah: np.ndarray
    K: np.ndarray


def stage2_batches(nets: TrackingNets, samples) -> List[Stage2Batch]:
    out = []
    for s in _pair_samples(samples):
        fd, ft, _ = _fused_pair(nets, s)
        d, _ = feature_distance(nets, fd, ft)
        out.append(Stage2Batch(fd, ft, d, s.d_mah, s.K))
    return out


def _combined(nets, b: Stage2Batch):
    alpha, beta, tape = coef_forward(nets, b.fd, b.ft)
    D = b.d_mah + alpha * (b.d_feat - (0.5 + beta))
    return D, alpha, beta, tape


def stage2_batch(nets: TrackingNets, b: Stage2Batch, consts: LossConstants) -> float:
    """Max-margin loss on one frame's combined distances; leaves fresh G3 gradients."""
    nets.params["g3"].zero_grad()
    D, alpha, beta, tape = _combined(nets, b)
    loss, gD = stage2_loss(D, b.K, consts, with_grad=True)
    g = np.stack([(gD * (b.d_feat - (0.5 + beta))).ravel(), (-gD * alpha).ravel()], axis=1)
    backward(nets.nets["g3"], nets.params["g3"], tape, g)
    return loss


def evaluate_stage2(nets: TrackingNets, batches: Sequence[Stage2Batch], consts: LossConstants):
    losses, ok, total, alphas = [], 0, 0, []
    for b in batches:
        D, alpha, _, _ = _combined(nets, b)
        losses.append(stage2_loss(D, b.K, consts))
        k, n = separated_fraction(D, b.K, consts.c_contr)
        ok += k
        total += n
        alphas.append(alpha.ravel())
    return float(np.mean(losses)), ok / max(total, 1), float(np.mean(np.concatenate(alphas)))


def train_stage2(nets: TrackingNets, samples: Sequence[FrameSample], cfg: TrainConfig, telemetry: Telemetry) -> None:
    """Train G3 on the max-margin losses with G1 and G2 frozen."""
    nets.freeze("g1", "g2")
    batches = stage2_batches(nets, samples)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(cfg.lr)
    loss, frac, mean_alpha = evaluate_stage2(nets, batches, cfg.loss)
    telemetry.emit(stage="stage2", epoch=0, loss=loss, separated=frac, mean_alpha=mean_alpha)
    for epoch in range(1, cfg.epochs + 1):
        for i in rng.permutation(len(batches)):
            stage2_batch(nets, batches[i], cfg.loss)
            opt.step(nets.params["g3"])
        loss, frac, mean_alpha = evaluate_stage2(nets, batches, cfg.loss)
        telemetry.emit(stage="stage2", epoch=epoch, loss=loss, separated=frac, mean_alpha=mean_alpha)
        _checkpoint(nets, cfg, f"_stage2_epoch{epoch:02d}")


def evaluate_init(nets: TrackingNets, samples: Sequence[FrameSample]):
    losses, scores, labels = [], [], []
    for s in samples:
        P, _ = init_score(nets, nets.fuse(s.det_f2d, s.det_f3d))
        losses.append(bce(P, s.init_target) * len(P))
        scores.append(P)
        labels.append(s.init_target)
    scores, labels = np.concatenate(scores), np.concatenate(labels)
    acc = float(np.mean((scores > 0.5) == (labels == 1)))
    return float(np.sum(losses) / len(labels)), acc, pair_auc(scores, labels)


def init_batch(nets: TrackingNets, fused: np.ndarray, target: np.ndarray) -> float:
    """Init BCE on one frame's detections; leaves fresh G4 gradients."""
    nets.params["g4"].zero_grad()
    P, tape = init_score(nets, fused)
    backward(nets.nets["g4"], nets.params["g4"], tape, bce_grad(P, target).reshape(-1, 1))
    return bce(P, target)


def train_init(nets: TrackingNets, samples: Sequence[FrameSample], cfg: TrainConfig, telemetry: Telemetry) -> None:
    """Train G4 on per-detection objectness targets; G1 stays frozen."""
    nets.freeze("g1")
    batches = [s for s in samples if len(s.init_target)]
    fused = [nets.fuse(s.det_f2d, s.det_f3d) for s in batches]
    rng = np.random.default_rng(cfg.seed + 2)
    opt = Adam(cfg.lr)
    loss, acc, auc = evaluate_init(nets, batches)
    telemetry.emit(stage="init", epoch=0, loss=loss, accuracy=acc, auc=auc)
    for epoch in range(1, cfg.epochs + 1):
        for i in rng.permutation(len(batches)):
            init_batch(nets, fused[i], batches[i].init_target)
            opt.step(nets.params["g4"])
        loss, acc, auc = evaluate_init(nets, batches)
        telemetry.emit(stage="init", epoch=epoch, loss=loss, accuracy=acc, auc=auc)
        _checkpoint(nets, cfg, f"_init_epoch{epoch:02d}")


def _checkpoint(nets: TrackingNets, cfg: TrainConfig, suffix: str) -> None:
    if cfg.checkpoint_dir:
        nets.save(cfg.checkpoint_dir, suffix)


def train(
    nets: TrackingNets,
    samples: Sequence[FrameSample],
    cfg: TrainConfig = TrainConfig(),
    stages: Sequence[str] = ("stage1", "stage2", "init"),
    telemetry: Optional[Telemetry] = None,
) -> Telemetry:
    """Run the requested stages in order; final weights go to ``cfg.checkpoint_dir`` if set."""
    telemetry = telemetry or Telemetry()
    runners = {"stage1": train_stage1, "stage2": train_stage2, "init": train_init}
    for stage in stages:
        if stage not in runners:
            raise ValueError(f"unknown training stage {stage!r}")
        runners[stage](nets, samples, cfg, telemetry)
    if cfg.checkpoint_dir:
        nets.save(cfg.checkpoint_dir)
    for store in nets.params.values():
        store.frozen = False
    return telemetry


def telemetry_writer(path) -> Callable[[dict], None]:
    """Line-oriented JSON telemetry sink."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fh = open(path, "a")

    def sink(record: dict) -> None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()

    return sink
