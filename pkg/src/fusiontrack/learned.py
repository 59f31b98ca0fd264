"""The four trainable networks, their losses and the supervision labels.

G1 fuses appearance (2D) and geometry (3D) features, G2 scores pair
dissimilarity, G3 predicts per-pair combining coefficients (alpha, beta) and
G4 scores whether an unmatched detection should start a track.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .neuralnet import (
    LayerSpec,
    Net,
    ParamStore,
    backward,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

MATCH_RADIUS = 2.0
# initial scale of G3's output layer, so alpha starts near zero
COEF_INIT_SCALE = 1e-2


@dataclass(frozen=True)
class NetDims:
    feat2d_dim: int = 1030
    channels: int = 512
    grid: int = 3
    fusion_hidden: int = 1536
    conv_channels: int = 256
    mlp_hidden: int = 128

    @property
    def feat3d_shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.grid, self.grid)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


FULL_DIMS = NetDims()
DESK_DIMS = NetDims(feat2d_dim=16, channels=8, grid=3, fusion_hidden=64, conv_channels=32, mlp_hidden=32)


@dataclass(frozen=True)
class LossConstants:
    gate: float = 11.0
    c_contr: float = 6.0
    c_pos: float = 3.0
    c_neg: float = 3.0

    def __post_init__(self):
        if min(self.gate, self.c_contr, self.c_pos, self.c_neg) <= 0:
            raise ValueError("loss constants must be positive")


def _trunk(in_channels: int, dims: NetDims) -> list:
    spatial = (dims.grid - 2) ** 2
    return [
        LayerSpec("conv3x3_valid", (in_channels, dims.conv_channels)),
        LayerSpec("relu"),
        LayerSpec("reshape", (dims.conv_channels * spatial,)),
        LayerSpec("dense", (dims.conv_channels * spatial, dims.mlp_hidden)),
        LayerSpec("relu"),
    ]


def fusion_net(dims: NetDims) -> Net:
    return Net("g1_fusion", (
        LayerSpec("dense", (dims.feat2d_dim, dims.fusion_hidden)),
        LayerSpec("relu"),
        LayerSpec("dense", (dims.fusion_hidden, dims.channels * dims.grid ** 2)),
        LayerSpec("reshape", dims.feat3d_shape),
    ))


def feat_dist_net(dims: NetDims) -> Net:
    return Net("g2_featdist", tuple(
        [LayerSpec("concat")] + _trunk(2 * dims.channels, dims)
        + [LayerSpec("dense", (dims.mlp_hidden, 1)), LayerSpec("sigmoid")]
    ))


def coef_net(dims: NetDims) -> Net:
    return Net("g3_coef", tuple(
        [LayerSpec("concat")] + _trunk(2 * dims.channels, dims) + [LayerSpec("dense", (dims.mlp_hidden, 2))]
    ))


def init_net(dims: NetDims) -> Net:
    return Net("g4_init", tuple(
        _trunk(dims.channels, dims) + [LayerSpec("dense", (dims.mlp_hidden, 1)), LayerSpec("sigmoid")]
    ))


NET_KEYS = ("g1", "g2", "g3", "g4")
_BUILDERS = {"g1": fusion_net, "g2": feat_dist_net, "g3": coef_net, "g4": init_net}


@dataclass
class TrackingNets:
    """The G1-G4 networks and their parameters."""

    dims: NetDims
    nets: Dict[str, Net]
    params: Dict[str, ParamStore]

    @classmethod
    def create(cls, dims: NetDims = DESK_DIMS, seed: int = 0) -> "TrackingNets":
        rng = np.random.default_rng(seed)
        nets = {k: _BUILDERS[k](dims) for k in NET_KEYS}
        params = {
            k: init_params(nets[k], rng, final_scale=COEF_INIT_SCALE if k == "g3" else 1.0)
            for k in NET_KEYS
        }
        return cls(dims, nets, params)

    def freeze(self, *keys: str) -> None:
        for k in keys or NET_KEYS:
            self.params[k].frozen = True

    def zero_coefficients(self) -> None:
        """Force alpha = beta = 0 so the combined distance is purely Mahalanobis."""
        last = len(self.nets["g3"].layers) - 1
        self.params["g3"].params[f"{last}.W"][:] = 0.0
        self.params["g3"].params[f"{last}.b"][:] = 0.0

    # inference -----------------------------------------------------------
    def fuse(self, feat2d: np.ndarray, feat3d: np.ndarray) -> np.ndarray:
        return fuse(self, feat2d, feat3d)[0]

    def feature_distance(self, fused_det: np.ndarray, fused_trk: np.ndarray) -> np.ndarray:
        return feature_distance(self, fused_det, fused_trk)[0]

    def coefficients(self, fused_det: np.ndarray, fused_trk: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        alpha, beta, _ = coef_forward(self, fused_det, fused_trk)
        return alpha, beta

    def init_score(self, fused: np.ndarray) -> np.ndarray:
        return init_score(self, fused)[0]

    # persistence ---------------------------------------------------------
    def save(self, directory, suffix: str = "") -> None:
        os.makedirs(directory, exist_ok=True)
        for k in NET_KEYS:
            save_checkpoint(os.path.join(directory, f"{k}{suffix}.npz"), self.nets[k], self.params[k])

    @classmethod
    def load(cls, directory) -> "TrackingNets":
        nets, params = {}, {}
        for k in NET_KEYS:
            nets[k], params[k] = load_checkpoint(os.path.join(directory, f"{k}.npz"))
        first = nets["g1"].layers[0].dims
        last = nets["g1"].layers[-1].dims
        dims = NetDims(
            feat2d_dim=first[0],
            channels=last[0],
            grid=last[1],
            fusion_hidden=first[1],
            conv_channels=nets["g4"].layers[0].dims[1],
            mlp_hidden=nets["g4"].layers[3].dims[1],
        )
        expected = {k: _BUILDERS[k](dims) for k in NET_KEYS}
        if expected != nets:
            raise ValueError(f"checkpoints in {directory} do not describe one consistent network set")
        return cls(dims, nets, params)


# forward helpers returning tapes for training --------------------------------

def fuse(nets: TrackingNets, feat2d: np.ndarray, feat3d: np.ndarray):
    """Fused feature G1(feat2d) + feat3d. Returns (fused, tape)."""
    feat2d = np.asarray(feat2d, dtype=float)
    feat3d = np.asarray(feat3d, dtype=float)
    dims = nets.dims
    if feat2d.ndim != 2 or feat2d.shape[1] != dims.feat2d_dim:
        raise ValueError(f"feat2d must be (batch, {dims.feat2d_dim}), got {feat2d.shape}")
    if feat3d.shape[1:] != dims.feat3d_shape or feat3d.shape[0] != feat2d.shape[0]:
        raise ValueError(f"feat3d must be (batch,) + {dims.feat3d_shape}, got {feat3d.shape}")
    mapped, tape = forward(nets.nets["g1"], nets.params["g1"], feat2d)
    return mapped + feat3d, tape


def pair_inputs(fused_det: np.ndarray, fused_trk: np.ndarray):
    """All (detection, track) pairs, row n*M + m holds detection n with track m."""
    n, m = fused_det.shape[0], fused_trk.shape[0]
    return np.repeat(fused_det, m, axis=0), np.tile(fused_trk, (n, 1, 1, 1))


def pair_grad(grads, n: int, m: int):
    """Fold pair-row gradients back onto the detection and track batches."""
    g_det, g_trk = grads
    rest = g_det.shape[1:]
    return g_det.reshape((n, m) + rest).sum(axis=1), g_trk.reshape((n, m) + rest).sum(axis=0)


def feature_distance(nets: TrackingNets, fused_det: np.ndarray, fused_trk: np.ndarray):
    """N x M matrix in (0, 1). Returns (d_feat, tape)."""
    n, m = len(fused_det), len(fused_trk)
    if n == 0 or m == 0:
        return np.zeros((n, m)), None
    out, tape = forward(nets.nets["g2"], nets.params["g2"], pair_inputs(fused_det, fused_trk))
    return out.reshape(n, m), tape


def coef_forward(nets: TrackingNets, fused_det: np.ndarray, fused_trk: np.ndarray):
    """Per-pair (alpha, beta), each N x M. Returns (alpha, beta, tape)."""
    n, m = len(fused_det), len(fused_trk)
    if n == 0 or m == 0:
        return np.zeros((n, m)), np.zeros((n, m)), None
    out, tape = forward(nets.nets["g3"], nets.params["g3"], pair_inputs(fused_det, fused_trk))
    return out[:, 0].reshape(n, m), out[:, 1].reshape(n, m), tape


def init_score(nets: TrackingNets, fused: np.ndarray):
    """Per-detection probability that a new track should start. Returns (P, tape)."""
    if len(fused) == 0:
        return np.zeros(0), None
    out, tape = forward(nets.nets["g4"], nets.params["g4"], fused)
    return out[:, 0], tape


# losses -----------------------------------------------------------------------

def _check_prob(p: np.ndarray, what: str) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if not (np.all(p > 0.0) and np.all(p < 1.0)):
        raise ValueError(f"{what} must lie strictly inside (0, 1)")
    return p


def bce(p, target) -> float:
    """Mean binary cross-entropy of predicted probabilities against {0,1} targets."""
    p = _check_prob(p, "predicted probabilities")
    y = np.asarray(target, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    if p.size == 0:
        return 0.0
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def bce_grad(p, target) -> np.ndarray:
    p = _check_prob(p, "predicted probabilities")
    y = np.asarray(target, dtype=float)
    if p.size == 0:
        return np.zeros_like(p)
    return (p - y) / (p * (1.0 - p)) / p.size


def stage1_loss(d_feat, K) -> float:
    """Pair classification loss: d_feat is the predicted probability of 'unmatched' (K=1)."""
    return bce(d_feat, K)


def init_loss(P, targets) -> float:
    return bce(P, targets)


def stage2_loss(D, K, consts: LossConstants = LossConstants(), with_grad: bool = False):
    """Max-margin loss on the combined distance.

    Positives (K=0) should sit ``c_pos`` below the gate, negatives (K=1)
    ``c_neg`` above it, and every positive should undercut every negative by
    ``c_contr``. Empty positive or negative sets contribute nothing.
    """
    D = np.asarray(D, dtype=float)
    K = np.asarray(K)
    if D.shape != K.shape:
        raise ValueError(f"shape mismatch {D.shape} vs {K.shape}")
    pos, neg = K == 0, K == 1
    d_pos, d_neg = D[pos], D[neg]
    grad = np.zeros_like(D)
    loss = 0.0
    if d_pos.size and d_neg.size:
        slack = consts.c_contr - (d_neg[None, :] - d_pos[:, None])
        active = slack > 0
        scale = 1.0 / (d_pos.size * d_neg.size)
        loss += float(np.sum(slack[active]) * scale)
        g_pos = active.sum(axis=1) * scale
        g_neg = -active.sum(axis=0) * scale
        grad[pos] += g_pos
        grad[neg] += g_neg
    if d_pos.size:
        slack = consts.c_pos - (consts.gate - d_pos)
        loss += float(np.mean(np.maximum(slack, 0.0)))
        grad[pos] += (slack > 0) / d_pos.size
    if d_neg.size:
        slack = consts.c_neg - (d_neg - consts.gate)
        loss += float(np.mean(np.maximum(slack, 0.0)))
        grad[neg] -= (slack > 0) / d_neg.size
    return (loss, grad) if with_grad else loss


def separated_fraction(D, K, c_contr: float) -> Tuple[int, int]:
    """Count of (positive, negative) pairs with d_pos + c_contr <= d_neg, and the total."""
    D, K = np.asarray(D), np.asarray(K)
    d_pos, d_neg = D[K == 0], D[K == 1]
    if not d_pos.size or not d_neg.size:
        return 0, 0
    ok = d_pos[:, None] + c_contr <= d_neg[None, :]
    return int(ok.sum()), int(ok.size)


# supervision labels -----------------------------------------------------------

def _nearest(points: np.ndarray, ref: np.ndarray):
    if len(ref) == 0:
        return np.full(len(points), -1), np.full(len(points), np.inf)
    d = np.linalg.norm(points[:, None, :] - ref[None, :, :], axis=2)
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(len(points)), idx]


def label_pairs(
    track_xy_prev: np.ndarray,
    det_xy: np.ndarray,
    gt_prev_ids: np.ndarray,
    gt_prev_xy: np.ndarray,
    gt_ids: np.ndarray,
    gt_xy: np.ndarray,
    radius: float = MATCH_RADIUS,
) -> np.ndarray:
    """Indicator K (N detections x M tracks): 0 for matched pairs, 1 otherwise.

    A pair is matched when the track's nearest ground truth at t-1 and the
    detection's nearest ground truth at t share an identity and both lie
    closer than ``radius`` (2D center distance).
    """
    track_xy_prev = np.asarray(track_xy_prev, dtype=float).reshape(-1, 2)
    det_xy = np.asarray(det_xy, dtype=float).reshape(-1, 2)
    n, m = len(det_xy), len(track_xy_prev)
    K = np.ones((n, m), dtype=np.int8)
    if len(gt_prev_ids) == 0 or len(gt_ids) == 0:
        return K
    t_idx, t_dist = _nearest(track_xy_prev, np.asarray(gt_prev_xy, dtype=float).reshape(-1, 2))
    d_idx, d_dist = _nearest(det_xy, np.asarray(gt_xy, dtype=float).reshape(-1, 2))
    t_id = np.where(t_dist < radius, np.asarray(gt_prev_ids)[t_idx], -1)
    d_id = np.where(d_dist < radius, np.asarray(gt_ids)[d_idx], -2)
    K[d_id[:, None] == t_id[None, :]] = 0
    return K


def init_targets(det_xy: np.ndarray, gt_xy: np.ndarray, radius: float = MATCH_RADIUS) -> np.ndarray:
    """1 where some ground-truth center lies within ``radius`` of the detection."""
    det_xy = np.asarray(det_xy, dtype=float).reshape(-1, 2)
    _, dist = _nearest(det_xy, np.asarray(gt_xy, dtype=float).reshape(-1, 2))
    return (dist < radius).astype(float)
