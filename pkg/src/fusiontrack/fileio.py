"""Text file formats and the run configuration.

All numeric values are written with ``repr`` (shortest round-trip decimal),
so write -> read reproduces every float bit-exactly. Each file starts with a
magic line and a ``key=value`` header line; body lines are whitespace
separated. See ``docs/formats.md`` for the full layout.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .core import OBS_DIM, STATE_DIM, ConfigMismatchError, Detection, Observation
from .filtering import NoiseSuite
from .learned import DESK_DIMS, LossConstants, NetDims
from .lifecycle import LifecyclePolicy

DETECTIONS_MAGIC = "# fusiontrack detections v1"
GROUNDTRUTH_MAGIC = "# fusiontrack groundtruth v1"
TRACKS_MAGIC = "# fusiontrack tracks v1"


class FormatError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        where = ""
        if path:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif path:
            where += " "
        super().__init__(where + message)


@dataclass(frozen=True, eq=False)
class GtBox:
    id: int
    class_id: str
    state: np.ndarray

    def __post_init__(self):
        state = np.array(self.state, dtype=float)
        if state.shape != (STATE_DIM,):
            raise ValueError(f"ground-truth state needs {STATE_DIM} values")
        state.setflags(write=False)
        object.__setattr__(self, "state", state)


@dataclass(frozen=True, eq=False)
class TrackRecord:
    frame: int
    id: int
    class_id: str
    state: np.ndarray
    score: float

    def __post_init__(self):
        state = np.array(self.state, dtype=float)
        if state.shape != (STATE_DIM,):
            raise ValueError(f"track state needs {STATE_DIM} values")
        state.setflags(write=False)
        object.__setattr__(self, "state", state)

    def key(self) -> tuple:
        return (self.frame, self.id, self.class_id, tuple(self.state.tolist()), self.score)


def _fmt(values: Iterable[float]) -> str:
    return " ".join(repr(float(v)) for v in values)


def _atomic_write(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _parse_header(lines: List[str], magic: str, path: Optional[str]) -> Dict[str, str]:
    if not lines or lines[0].rstrip("\n") != magic:
        raise FormatError(f"expected first line {magic!r}", 1, path)
    if len(lines) < 2 or not lines[1].startswith("#"):
        raise FormatError("missing header line", 2, path)
    header = {}
    for item in lines[1][1:].split():
        key, sep, value = item.partition("=")
        if not sep:
            raise FormatError(f"malformed header entry {item!r}", 2, path)
        header[key] = value
    return header


def _header_int(header: Dict[str, str], key: str, path) -> int:
    try:
        value = int(header[key])
    except (KeyError, ValueError):
        raise FormatError(f"header needs integer {key}", 2, path) from None
    if value < 0:
        raise FormatError(f"header {key} must be non-negative", 2, path)
    return value


def _body(lines: List[str]):
    for lineno, line in enumerate(lines[2:], start=3):
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            yield lineno, stripped.split()


def _floats(tokens: Sequence[str], lineno: int, path) -> List[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise FormatError(str(exc), lineno, path) from None


def _read_lines(source) -> Tuple[List[str], Optional[str]]:
    if hasattr(source, "read"):
        return source.read().splitlines(), getattr(source, "name", None)
    path = os.fspath(source)
    with open(path) as fh:
        return fh.read().splitlines(), path


def _frame_index(token: str, n_frames: int, last: int, lineno: int, path) -> int:
    try:
        frame = int(token)
    except ValueError:
        raise FormatError(f"bad frame index {token!r}", lineno, path) from None
    if not 0 <= frame < n_frames:
        raise FormatError(f"frame {frame} outside [0, {n_frames})", lineno, path)
    if frame < last:
        raise FormatError(f"frame {frame} follows frame {last}; frames must be nondecreasing", lineno, path)
    return frame


# detections ------------------------------------------------------------------

@dataclass(frozen=True)
class DetectionHeader:
    n_frames: int
    frame_interval: float
    feat2d_dim: int
    feat3d_shape: Tuple[int, int, int]


def format_detections(frames: Sequence[Sequence[Detection]], header: DetectionHeader) -> str:
    shape = "x".join(str(d) for d in header.feat3d_shape)
    out = [
        DETECTIONS_MAGIC,
        f"# n_frames={header.n_frames} frame_interval={header.frame_interval!r} "
        f"feat2d_dim={header.feat2d_dim} feat3d_shape={shape}",
    ]
    for t, dets in enumerate(frames):
        for d in dets:
            d.check_dims(header.feat2d_dim, header.feat3d_shape)
            if d.frame != t:
                raise ValueError(f"detection stamped frame {d.frame} listed under frame {t}")
            out.append(
                f"{t} {d.class_id} {_fmt(d.obs.as_array())} {d.confidence!r} "
                f"{_fmt(d.feat2d)} {_fmt(d.feat3d.ravel())}"
            )
    return "\n".join(out) + "\n"


def write_detections(path, frames, header: DetectionHeader) -> None:
    _atomic_write(path, format_detections(frames, header))


def read_detections(source) -> Tuple[DetectionHeader, List[List[Detection]]]:
    lines, path = _read_lines(source)
    raw = _parse_header(lines, DETECTIONS_MAGIC, path)
    n_frames = _header_int(raw, "n_frames", path)
    feat2d_dim = _header_int(raw, "feat2d_dim", path)
    try:
        interval = float(raw["frame_interval"])
        shape = tuple(int(v) for v in raw["feat3d_shape"].split("x"))
    except (KeyError, ValueError):
        raise FormatError("header needs frame_interval and feat3d_shape=CxHxW", 2, path) from None
    if len(shape) != 3:
        raise FormatError("feat3d_shape must have three dimensions", 2, path)
    header = DetectionHeader(n_frames, interval, feat2d_dim, shape)
    n3 = int(np.prod(shape))
    expected = 2 + OBS_DIM + 1 + feat2d_dim + n3
    frames: List[List[Detection]] = [[] for _ in range(n_frames)]
    last = 0
    for lineno, tok in _body(lines):
        if len(tok) != expected:
            raise FormatError(
                f"expected {expected} fields (header dims {feat2d_dim} + {n3}), got {len(tok)}", lineno, path
            )
        frame = last = _frame_index(tok[0], n_frames, last, lineno, path)
        vals = _floats(tok[2:], lineno, path)
        try:
            det = Detection(
                obs=Observation(*vals[:OBS_DIM]),
                class_id=tok[1],
                confidence=vals[OBS_DIM],
                feat2d=np.array(vals[OBS_DIM + 1:OBS_DIM + 1 + feat2d_dim]),
                feat3d=np.array(vals[OBS_DIM + 1 + feat2d_dim:]).reshape(shape),
                frame=frame,
            )
        except ValueError as exc:
            raise FormatError(str(exc), lineno, path) from None
        frames[frame].append(det)
    return header, frames


# ground truth ----------------------------------------------------------------

def format_groundtruth(frames: Sequence[Sequence[GtBox]]) -> str:
    out = [GROUNDTRUTH_MAGIC, f"# n_frames={len(frames)}"]
    for t, boxes in enumerate(frames):
        for b in boxes:
            out.append(f"{t} {b.id} {b.class_id} {_fmt(b.state)}")
    return "\n".join(out) + "\n"


def write_groundtruth(path, frames) -> None:
    _atomic_write(path, format_groundtruth(frames))


def read_groundtruth(source) -> List[List[GtBox]]:
    lines, path = _read_lines(source)
    raw = _parse_header(lines, GROUNDTRUTH_MAGIC, path)
    n_frames = _header_int(raw, "n_frames", path)
    frames: List[List[GtBox]] = [[] for _ in range(n_frames)]
    seen = set()
    last = 0
    for lineno, tok in _body(lines):
        if len(tok) != 3 + STATE_DIM:
            raise FormatError(f"expected {3 + STATE_DIM} fields, got {len(tok)}", lineno, path)
        frame = last = _frame_index(tok[0], n_frames, last, lineno, path)
        try:
            gid = int(tok[1])
        except ValueError:
            raise FormatError(f"bad identity {tok[1]!r}", lineno, path) from None
        if (frame, gid) in seen:
            raise FormatError(f"duplicate identity {gid} in frame {frame}", lineno, path)
        seen.add((frame, gid))
        frames[frame].append(GtBox(gid, tok[2], np.array(_floats(tok[3:], lineno, path))))
    return frames


# tracks ----------------------------------------------------------------------

def format_tracks(records: Sequence[TrackRecord], n_frames: int) -> str:
    out = [TRACKS_MAGIC, f"# n_frames={n_frames}"]
    for r in records:
        out.append(f"{r.frame} {r.id} {r.class_id} {_fmt(r.state)} {r.score!r}")
    return "\n".join(out) + "\n"


def write_tracks(path, records: Sequence[TrackRecord], n_frames: int) -> None:
    _atomic_write(path, format_tracks(records, n_frames))


def read_tracks(source) -> Tuple[int, List[TrackRecord]]:
    lines, path = _read_lines(source)
    raw = _parse_header(lines, TRACKS_MAGIC, path)
    n_frames = _header_int(raw, "n_frames", path)
    records = []
    seen = set()
    last = 0
    for lineno, tok in _body(lines):
        if len(tok) != 4 + STATE_DIM:
            raise FormatError(f"expected {4 + STATE_DIM} fields, got {len(tok)}", lineno, path)
        frame = last = _frame_index(tok[0], n_frames, last, lineno, path)
        try:
            tid = int(tok[1])
        except ValueError:
            raise FormatError(f"bad track id {tok[1]!r}", lineno, path) from None
        if (frame, tid) in seen:
            raise FormatError(f"duplicate track id {tid} in frame {frame}", lineno, path)
        seen.add((frame, tid))
        vals = _floats(tok[3:], lineno, path)
        if not 0.0 <= vals[-1] <= 1.0:
            raise FormatError(f"score {vals[-1]} outside [0, 1]", lineno, path)
        records.append(TrackRecord(frame, tid, tok[2], np.array(vals[:-1]), vals[-1]))
    return n_frames, records


# JSON documents ----------------------------------------------------------------

def write_json(path, data) -> None:
    _atomic_write(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    path = os.fspath(path)
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(exc.msg, exc.lineno, path) from None


def write_noise(path, noise: NoiseSuite) -> None:
    write_json(path, {"format": "fusiontrack-noise/1", "classes": noise.to_dict()})


def read_noise(path) -> NoiseSuite:
    data = read_json(path)
    if data.get("format") != "fusiontrack-noise/1":
        raise FormatError("not a noise suite file", None, os.fspath(path))
    try:
        return NoiseSuite.from_dict(data["classes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed noise suite: {exc}", None, os.fspath(path)) from None


@dataclass
class OptimizerSettings:
    lr: float = 1e-3
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1:
            raise ValueError("optimizer needs lr > 0 and epochs >= 1")


@dataclass
class RunConfig:
    noise: Optional[NoiseSuite] = None
    policy: LifecyclePolicy = field(default_factory=LifecyclePolicy)
    gate: float = 11.0
    checkpoints: Optional[str] = None
    feature_dims: NetDims = DESK_DIMS
    loss: LossConstants = field(default_factory=LossConstants)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    confidence_floor: float = 0.0

    def __post_init__(self):
        if self.gate <= 0:
            raise ValueError("gate must be positive")
        if not 0.0 <= self.confidence_floor <= 1.0:
            raise ValueError("confidence_floor must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "format": "fusiontrack-config/1",
            "noise": self.noise.to_dict() if self.noise is not None else None,
            "policy": self.policy.to_dict(),
            "gate": self.gate,
            "checkpoints": self.checkpoints,
            "feature_dims": self.feature_dims.to_dict(),
            "loss": asdict(self.loss),
            "optimizer": asdict(self.optimizer),
            "confidence_floor": self.confidence_floor,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if data.get("format", "fusiontrack-config/1") != "fusiontrack-config/1":
            raise ValueError(f"unsupported config format {data.get('format')!r}")
        known = {"format", "noise", "policy", "gate", "checkpoints", "feature_dims", "loss", "optimizer",
                 "confidence_floor"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        noise = data.get("noise")
        return cls(
            noise=NoiseSuite.from_dict(noise) if noise else None,
            policy=LifecyclePolicy(**data.get("policy", {})),
            gate=float(data.get("gate", 11.0)),
            checkpoints=data.get("checkpoints"),
            feature_dims=NetDims(**data["feature_dims"]) if "feature_dims" in data else DESK_DIMS,
            loss=LossConstants(**data.get("loss", {})),
            optimizer=OptimizerSettings(**data.get("optimizer", {})),
            confidence_floor=float(data.get("confidence_floor", 0.0)),
        )


def write_config(path, config: RunConfig) -> None:
    write_json(path, config.to_dict())


def read_config(path) -> RunConfig:
    data = read_json(path)
    try:
        return RunConfig.from_dict(data)
    except (TypeError, ValueError, KeyError) as exc:
        raise FormatError(f"malformed config: {exc}", None, os.fspath(path)) from None


def check_feature_dims(header: DetectionHeader, dims: NetDims) -> None:
    if header.feat2d_dim != dims.feat2d_dim or tuple(header.feat3d_shape) != dims.feat3d_shape:
        raise ConfigMismatchError(
            f"detection features {header.feat2d_dim}/{header.feat3d_shape} do not match "
            f"network dims {dims.feat2d_dim}/{dims.feat3d_shape}"
        )
