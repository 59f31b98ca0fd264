"""Synthetic scenarios: ground-truth trajectories, noisy detections, clutter and features.

Feature model: every class has a fixed prototype (drawn from
``feature_world_seed`` so it is shared across scenarios); every identity gets
a latent = prototype + ``identity_spread`` * N(0, 1); true detections carry
latent + ``feat_noise_std`` * N(0, 1). Clutter features are drawn fresh from
N(0, ``clutter_feat_std``^2), i.e. they do not share the class prototypes.
The last six slots of feat2d are a one-hot camera sector from the object's
bearing around the scene center.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import OBS_DIM, STATE_DIM, Detection, Observation, wrap_angle, wrap_angles
from .fileio import DetectionHeader, GtBox, write_detections, write_groundtruth

N_CAMERAS = 6


@dataclass(frozen=True)
class ClassTemplate:
    size: Tuple[float, float, float]
    z: float
    speed: Tuple[float, float]  # m/s


CLASS_TEMPLATES: Dict[str, ClassTemplate] = {
    "car": ClassTemplate((4.5, 1.9, 1.6), 0.8, (3.0, 15.0)),
    "pedestrian": ClassTemplate((0.8, 0.7, 1.75), 0.9, (0.5, 2.0)),
    "bicycle": ClassTemplate((1.8, 0.6, 1.3), 0.7, (2.0, 7.0)),
    "truck": ClassTemplate((8.0, 2.6, 3.2), 1.6, (3.0, 12.0)),
}

DEFAULT_DET_NOISE = (0.2, 0.2, 0.05, 0.1, 0.1, 0.05, 0.05, 0.1, 0.1)


@dataclass(frozen=True)
class ScenarioConfig:
    n_objects: Dict[str, int] = field(default_factory=lambda: {"car": 6, "pedestrian": 4})
    motion_mix: Tuple[float, float, float] = (0.6, 0.3, 0.1)  # constant velocity, constant turn, stationary
    n_frames: int = 40
    frame_interval: float = 0.5
    det_noise_std: Tuple[float, ...] = DEFAULT_DET_NOISE
    miss_prob: float = 0.1
    clutter_rate: float = 0.5
    feat2d_dim: int = 16
    feat3d_shape: Tuple[int, int, int] = (8, 3, 3)
    feat_noise_std: float = 0.3
    identity_spread: float = 1.0
    clutter_feat_std: float = 1.0
    feature_world_seed: int = 20210321
    max_turn_rate: float = 0.5
    turn_jitter_std: float = 0.05  # rad/s random walk per frame on the turn rate of turning movers
    scene_size: float = 100.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "motion_mix", tuple(float(v) for v in self.motion_mix))
        object.__setattr__(self, "det_noise_std", tuple(float(v) for v in self.det_noise_std))
        object.__setattr__(self, "feat3d_shape", tuple(int(v) for v in self.feat3d_shape))
        if len(self.motion_mix) != 3 or min(self.motion_mix) < 0 or not math.isclose(sum(self.motion_mix), 1.0):
            raise ValueError("motion_mix must be three nonnegative fractions summing to 1")
        if len(self.det_noise_std) != OBS_DIM or min(self.det_noise_std) < 0:
            raise ValueError(f"det_noise_std needs {OBS_DIM} nonnegative entries")
        if not 0.0 <= self.miss_prob <= 1.0:
            raise ValueError("miss_prob must lie in [0, 1]")
        if self.clutter_rate < 0:
            raise ValueError("clutter_rate must be >= 0")
        if self.n_frames < 2:
            raise ValueError("need at least 2 frames")
        if self.frame_interval <= 0:
            raise ValueError("frame_interval must be positive")
        if self.feat2d_dim <= N_CAMERAS:
            raise ValueError(f"feat2d_dim must exceed the {N_CAMERAS} camera slots")
        if len(self.feat3d_shape) != 3:
            raise ValueError("feat3d_shape must be (channels, rows, cols)")
        for cls, n in self.n_objects.items():
            if cls not in CLASS_TEMPLATES:
                raise ValueError(f"unknown class {cls!r}; known: {sorted(CLASS_TEMPLATES)}")
            if n < 0:
                raise ValueError("object counts must be >= 0")
        if self.clutter_rate > 0 and not self.n_objects:
            raise ValueError("clutter needs at least one class in n_objects (a zero count is fine)")
        if self.turn_jitter_std < 0:
            raise ValueError("turn_jitter_std must be >= 0")
        if min(self.feat_noise_std, self.identity_spread, self.clutter_feat_std) < 0:
            raise ValueError("feature scales must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        return cls(**data)


@dataclass
class Scenario:
    config: ScenarioConfig
    gt: List[List[GtBox]]
    detections: List[List[Detection]]
    det_truth: List[List[int]]  # ground-truth identity per detection, -1 for clutter
    latents: Dict[int, Tuple[np.ndarray, np.ndarray]]  # identity -> (appearance, geometry)

    @property
    def n_frames(self) -> int:
        return len(self.gt)

    @property
    def header(self) -> DetectionHeader:
        c = self.config
        return DetectionHeader(c.n_frames, c.frame_interval, c.feat2d_dim, c.feat3d_shape)

    @property
    def classes(self) -> List[str]:
        return sorted({b.class_id for f in self.gt for b in f} | {d.class_id for f in self.detections for d in f})

    def write(self, det_path, gt_path) -> None:
        write_detections(det_path, self.detections, self.header)
        write_groundtruth(gt_path, self.gt)


# trajectories ----------------------------------------------------------------

@dataclass
class _Trajectory:
    class_id: str
    birth: int
    states: List[np.ndarray]  # per frame from birth, 11-vectors


def _integrate(pos0, heading0, speed, turn_rates, size, z, dt, n_steps) -> List[np.ndarray]:
    """States for a constant speed mover; ``turn_rates`` is a scalar or one rate per frame.

    Deltas are per frame: d_x/d_y is the step that reached the current
    position and d_a the heading change to the next frame.
    """
    rates = np.broadcast_to(np.asarray(turn_rates, dtype=float), (n_steps,))
    states = []
    x, y = pos0
    heading = heading0
    for k in range(n_steps):
        if k > 0:
            heading += rates[k - 1] * dt
        dx, dy = speed * dt * math.cos(heading), speed * dt * math.sin(heading)
        if k > 0:
            x, y = x + dx, y + dy
        d_a = wrap_angle(rates[k] * dt) if speed > 0 else 0.0
        states.append(np.array([x, y, z, wrap_angle(heading), *size, dx, dy, 0.0, d_a]))
    return states


def _turn_rates(rng, turn: float, cfg: ScenarioConfig, n_steps: int) -> np.ndarray:
    """Turn rate drifting as a random walk around ``turn``, so no mover turns perfectly steadily."""
    if cfg.turn_jitter_std == 0 or n_steps == 0:
        return np.full(n_steps, turn)
    steps = cfg.turn_jitter_std * rng.standard_normal(n_steps)
    steps[0] = 0.0
    return np.clip(turn + np.cumsum(steps), -cfg.max_turn_rate, cfg.max_turn_rate)


def _inside(state, scene) -> bool:
    return 0.0 <= state[0] <= scene and 0.0 <= state[1] <= scene


def _random_trajectory(rng, cls: str, cfg: ScenarioConfig) -> _Trajectory:
    tpl = CLASS_TEMPLATES[cls]
    scene = cfg.scene_size
    birth = 0 if rng.random() < 0.5 else int(rng.integers(1, max(2, cfg.n_frames // 2)))
    size = tuple(float(s * np.clip(1.0 + 0.1 * rng.standard_normal(), 0.7, 1.3)) for s in tpl.size)
    motion = rng.choice(3, p=cfg.motion_mix)
    heading = rng.uniform(-math.pi, math.pi)
    speed = 0.0 if motion == 2 else rng.uniform(*tpl.speed)
    turn = 0.0
    if motion == 1:
        turn = rng.uniform(0.1, cfg.max_turn_rate) * rng.choice([-1.0, 1.0])
    pos = rng.uniform(0.1 * scene, 0.9 * scene, size=2)
    n_steps = cfg.n_frames - birth
    if turn:
        turn = _turn_rates(rng, turn, cfg, n_steps)
    states = _integrate(pos, heading, speed, turn, size, tpl.z, cfg.frame_interval, n_steps)
    alive = []
    for s in states:
        if not _inside(s, scene):
            break
        alive.append(s)
    return _Trajectory(cls, birth, alive)


# features --------------------------------------------------------------------

def _class_prototypes(cls: str, cfg: ScenarioConfig) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([cfg.feature_world_seed, zlib.crc32(cls.encode())])
    return rng.standard_normal(cfg.feat2d_dim - N_CAMERAS), rng.standard_normal(cfg.feat3d_shape)


def camera_slot(x: float, y: float, scene: float) -> int:
    bearing = math.atan2(y - scene / 2.0, x - scene / 2.0)
    return int(((bearing + math.pi) / (2.0 * math.pi)) * N_CAMERAS) % N_CAMERAS


def _feat2d(appearance: np.ndarray, x: float, y: float, cfg: ScenarioConfig) -> np.ndarray:
    onehot = np.zeros(N_CAMERAS)
    onehot[camera_slot(x, y, cfg.scene_size)] = 1.0
    return np.concatenate([appearance, onehot])


# generation ------------------------------------------------------------------

def _observe(state: np.ndarray, rng, cfg: ScenarioConfig) -> np.ndarray:
    obs = state[:OBS_DIM] + np.asarray(cfg.det_noise_std) * rng.standard_normal(OBS_DIM)
    obs[3] = wrap_angle(obs[3])
    obs[4:7] = np.maximum(np.abs(obs[4:7]), 0.05)
    return obs


def _clutter(rng, frame: int, cfg: ScenarioConfig) -> Detection:
    classes = sorted(cfg.n_objects)
    cls = classes[int(rng.integers(len(classes)))]
    tpl = CLASS_TEMPLATES[cls]
    x, y = rng.uniform(0.0, cfg.scene_size, size=2)
    heading = rng.uniform(-math.pi, math.pi)
    speed = rng.uniform(0.0, tpl.speed[1]) * cfg.frame_interval
    size = [float(s * np.clip(1.0 + 0.2 * rng.standard_normal(), 0.5, 1.5)) for s in tpl.size]
    obs = Observation(x, y, tpl.z + 0.1 * rng.standard_normal(), wrap_angle(heading), *size,
                      speed * math.cos(heading), speed * math.sin(heading))
    appearance = cfg.clutter_feat_std * rng.standard_normal(cfg.feat2d_dim - N_CAMERAS)
    return Detection(
        obs=obs,
        class_id=cls,
        confidence=float(rng.beta(2.0, 5.0)),
        feat2d=_feat2d(appearance, x, y, cfg),
        feat3d=cfg.clutter_feat_std * rng.standard_normal(cfg.feat3d_shape),
        frame=frame,
    )


def _render(trajectories: List[_Trajectory], cfg: ScenarioConfig, rng) -> Scenario:
    latents = {}
    for gid, traj in enumerate(trajectories):
        proto2d, proto3d = _class_prototypes(traj.class_id, cfg)
        latents[gid] = (
            proto2d + cfg.identity_spread * rng.standard_normal(proto2d.shape),
            proto3d + cfg.identity_spread * rng.standard_normal(proto3d.shape),
        )
    gt: List[List[GtBox]] = [[] for _ in range(cfg.n_frames)]
    dets: List[List[Detection]] = [[] for _ in range(cfg.n_frames)]
    truth: List[List[int]] = [[] for _ in range(cfg.n_frames)]
    for t in range(cfg.n_frames):
        for gid, traj in enumerate(trajectories):
            k = t - traj.birth
            if not 0 <= k < len(traj.states):
                continue
            state = traj.states[k]
            gt[t].append(GtBox(gid, traj.class_id, state))
            if rng.random() < cfg.miss_prob:
                continue
            app, geo = latents[gid]
            obs = _observe(state, rng, cfg)
            dets[t].append(Detection(
                obs=Observation.from_array(obs),
                class_id=traj.class_id,
                confidence=float(rng.beta(5.0, 2.0)),
                feat2d=_feat2d(app + cfg.feat_noise_std * rng.standard_normal(app.shape), obs[0], obs[1], cfg),
                feat3d=geo + cfg.feat_noise_std * rng.standard_normal(geo.shape),
                frame=t,
            ))
            truth[t].append(gid)
        for _ in range(rng.poisson(cfg.clutter_rate)):
            dets[t].append(_clutter(rng, t, cfg))
            truth[t].append(-1)
        # detector output order carries no identity information
        order = rng.permutation(len(dets[t]))
        dets[t] = [dets[t][i] for i in order]
        truth[t] = [truth[t][i] for i in order]
    return Scenario(cfg, gt, dets, truth, latents)


def generate(config: ScenarioConfig) -> Scenario:
    """Random scenario; a pure function of ``config`` (including its seed)."""
    rng = np.random.default_rng(config.seed)
    trajectories = []
    for cls in sorted(config.n_objects):
        for _ in range(config.n_objects[cls]):
            traj = _random_trajectory(rng, cls, config)
            if traj.states:
                trajectories.append(traj)
    return _render(trajectories, config, rng)


CROSSING_CONFIG = ScenarioConfig(
    n_objects={"car": 4},
    n_frames=30,
    det_noise_std=(0.5, 0.5, 0.05, 0.15, 0.1, 0.05, 0.05, 0.3, 0.3),
    miss_prob=0.05,
    clutter_rate=0.2,
    motion_mix=(0.0, 1.0, 0.0),
)


def crossing_benchmark(seed: int, config: Optional[ScenarioConfig] = None) -> Scenario:
    """Two cars meet and leave along each other's incoming direction, plus turning cars.

    At the meeting frame the pair is closer than the position noise; after
    it, each car moves exactly as a constant-velocity prediction of the
    *other* car would, so kinematics alone favour swapping identities.
    """
    cfg = replace(config or CROSSING_CONFIG, seed=seed)
    rng = np.random.default_rng([seed, 0xC055])
    dt, n = cfg.frame_interval, cfg.n_frames
    tpl = CLASS_TEMPLATES["car"]
    t_meet = n // 2
    # meet away from the sensor at the scene center, where camera slots converge
    ring = rng.uniform(-math.pi, math.pi)
    center = np.full(2, cfg.scene_size / 2.0) + rng.uniform(20.0, 30.0) * np.array([math.cos(ring), math.sin(ring)])
    base = rng.uniform(-math.pi, math.pi)
    spread = math.radians(rng.uniform(40.0, 80.0))
    headings = (base, base + spread)
    speed = rng.uniform(5.0, 8.0)
    # lateral offset keeps the closest approach below the position noise
    offset = rng.uniform(0.0, 0.5 * cfg.det_noise_std[0])
    size = tuple(float(s) for s in tpl.size)
    trajectories = []
    for who, (h_in, h_out) in enumerate(((headings[0], headings[1]), (headings[1], headings[0]))):
        meet = center + (offset / 2.0) * (1 if who == 0 else -1) * np.array([-math.sin(base), math.cos(base)])
        states = []
        for t in range(n):
            heading = h_in if t <= t_meet else h_out
            step = speed * dt * np.array([math.cos(heading), math.sin(heading)])
            if t <= t_meet:
                pos = meet - speed * dt * (t_meet - t) * np.array([math.cos(h_in), math.sin(h_in)])
            else:
                pos = meet + speed * dt * (t - t_meet) * np.array([math.cos(h_out), math.sin(h_out)])
            d_a = wrap_angle(h_out - h_in) if t == t_meet + 1 else 0.0
            states.append(np.array([pos[0], pos[1], tpl.z, wrap_angle(heading), *size, step[0], step[1], 0.0, d_a]))
        trajectories.append(_Trajectory("car", 0, states))
    n_extra = max(0, cfg.n_objects.get("car", 0) - 2)
    for _ in range(n_extra):
        heading = rng.uniform(-math.pi, math.pi)
        turn = rng.uniform(0.2, cfg.max_turn_rate) * rng.choice([-1.0, 1.0])
        # keep the turners away from the meeting point
        angle = rng.uniform(-math.pi, math.pi)
        pos = center + rng.uniform(20.0, 35.0) * np.array([math.cos(angle), math.sin(angle)])
        speed_k = rng.uniform(3.0, 8.0)
        states = _integrate(pos, heading, speed_k, _turn_rates(rng, turn, cfg, n), size, tpl.z, dt, n)
        alive = []
        for s in states:
            if not _inside(s, cfg.scene_size):
                break
            alive.append(s)
        if alive:
            trajectories.append(_Trajectory("car", 0, alive))
    return _render(trajectories, cfg, rng)


def closest_approach(scenario: Scenario, a: int = 0, b: int = 1) -> float:
    """Minimum ground-plane distance between identities ``a`` and ``b`` over shared frames."""
    best = math.inf
    for frame in scenario.gt:
        boxes = {g.id: g for g in frame}
        if a in boxes and b in boxes:
            best = min(best, float(np.linalg.norm(boxes[a].state[:2] - boxes[b].state[:2])))
    return best
