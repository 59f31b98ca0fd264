"""Domain types and small numeric helpers shared across the tracker.

State layout (11): x, y, z, a, l, w, h, d_x, d_y, d_z, d_a
Observation layout (9): x, y, z, a, l, w, h, d_x, d_y

Velocities are per-frame displacements, angles are radians in (-pi, pi].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve
from scipy.linalg.lapack import dpotrf

STATE_DIM = 11
OBS_DIM = 9
STATE_FIELDS = ("x", "y", "z", "a", "l", "w", "h", "d_x", "d_y", "d_z", "d_a")
OBS_FIELDS = STATE_FIELDS[:OBS_DIM]
ANGLE_INDEX = 3
SIZE_SLICE = slice(4, 7)


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a Cholesky factorization hits a non-positive leading minor."""

    def __init__(self, minor: int, label: str = ""):
        self.minor = minor
        where = f" ({label})" if label else ""
        super().__init__(f"matrix{where} is not positive definite: leading minor of order {minor} fails")


class NonFiniteMatrixError(np.linalg.LinAlgError):
    """A covariance picked up inf or NaN entries (overflow upstream)."""

    def __init__(self, label: str = ""):
        where = f" {label}" if label else ""
        super().__init__(f"matrix{where} has non-finite entries")


class ConfigMismatchError(ValueError):
    """Inputs disagree with the configuration (classes, feature dims, checkpoints)."""


def wrap_angle(theta: float) -> float:
    """Map an angle onto the half-open interval (-pi, pi]."""
    if not math.isfinite(theta):
        raise ValueError(f"cannot wrap non-finite angle {theta!r}")
    wrapped = math.remainder(theta, 2.0 * math.pi)  # in [-pi, pi]
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorised :func:`wrap_angle`."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("cannot wrap non-finite angles")
    wrapped = np.remainder(theta + np.pi, 2.0 * np.pi) - np.pi
    # remainder lands on [-pi, pi); move the closed end to +pi
    return np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)


def cholesky(S: np.ndarray, label: str = "") -> np.ndarray:
    """Lower Cholesky factor of an SPD matrix.

    Raises NotPositiveDefiniteError naming the first failing leading minor.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise NonFiniteMatrixError(label)
    factor, info = dpotrf(S, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(int(info), label)
    if info < 0:
        raise ValueError(f"invalid argument {-info} to dpotrf")
    if not np.all(np.isfinite(factor)):
        raise NonFiniteMatrixError(label)
    return factor


def chol_solve(S: np.ndarray, b: np.ndarray, label: str = "") -> np.ndarray:
    """Solve ``S x = b`` for symmetric positive definite ``S``."""
    L = cholesky(S, label)
    return cho_solve((L, True), np.asarray(b, dtype=float))


def symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _frozen(arr, shape=None) -> np.ndarray:
    out = np.array(arr, dtype=float)
    if shape is not None and out.shape != shape:
        raise ValueError(f"expected shape {shape}, got {out.shape}")
    out.setflags(write=False)
    return out


class _Vector:
    """Mixin for the flat box dataclasses: array conversion in field order."""

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=float)

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=float).ravel()
        names = [f.name for f in fields(cls)]
        if values.size != len(names):
            raise ValueError(f"{cls.__name__} needs {len(names)} values, got {values.size}")
        return cls(*(float(v) for v in values))

    def _check_box(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got l={self.l} w={self.w} h={self.h}")
        if not (-math.pi < self.a <= math.pi):
            raise ValueError(f"heading {self.a} outside (-pi, pi]")


@dataclass(frozen=True)
class BoxState(_Vector):
    x: float
    y: float
    z: float
    a: float
    l: float
    w: float
    h: float
    d_x: float
    d_y: float
    d_z: float
    d_a: float

    def __post_init__(self):
        self._check_box()


@dataclass(frozen=True)
class Observation(_Vector):
    x: float
    y: float
    z: float
    a: float
    l: float
    w: float
    h: float
    d_x: float
    d_y: float

    def __post_init__(self):
        self._check_box()


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean, (STATE_DIM,)))
        object.__setattr__(self, "cov", _frozen(self.cov, (STATE_DIM, STATE_DIM)))

    def check(self, tol: float = 1e-9) -> None:
        """Assert the covariance is symmetric PSD within ``tol``."""
        if np.max(np.abs(self.cov - self.cov.T)) > tol:
            raise ValueError("covariance is not symmetric")
        if np.min(np.linalg.eigvalsh(self.cov)) < -tol:
            raise ValueError("covariance is not positive semidefinite")

    @property
    def state(self) -> BoxState:
        return BoxState.from_array(self.mean)


@dataclass(frozen=True, eq=False)
class Detection:
    obs: Observation
    class_id: str
    confidence: float
    feat2d: np.ndarray
    feat3d: np.ndarray
    frame: int

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        object.__setattr__(self, "feat2d", _frozen(self.feat2d))
        object.__setattr__(self, "feat3d", _frozen(self.feat3d))
        if self.feat2d.ndim != 1:
            raise ValueError("feat2d must be a vector")
        if self.feat3d.ndim != 3:
            raise ValueError("feat3d must be a (channels, rows, cols) tensor")

    def check_dims(self, feat2d_dim: int, feat3d_shape: tuple) -> None:
        if self.feat2d.shape != (feat2d_dim,) or self.feat3d.shape != tuple(feat3d_shape):
            raise ConfigMismatchError(
                f"feature dims {self.feat2d.shape}/{self.feat3d.shape} do not match "
                f"configured ({feat2d_dim},)/{tuple(feat3d_shape)}"
            )


@dataclass(frozen=True, eq=False)
class Track:
    id: int
    class_id: str
    belief: GaussianBelief
    fused_feat: Optional[np.ndarray]
    hits: int = 1
    consecutive_misses: int = 0
    score: float = 0.0
    confirmed: bool = True
    last_detection: Optional[Detection] = None

    def __post_init__(self):
        if self.hits < 1:
            raise ValueError("a track has at least one hit")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"track score {self.score} outside [0, 1]")
        if self.fused_feat is not None:
            object.__setattr__(self, "fused_feat", _frozen(self.fused_feat))
