"""3D multi-object tracking with Kalman filtering and learned association distances."""

__version__ = "0.1.0"

from .core import (
    BoxState,
    ConfigMismatchError,
    Detection,
    GaussianBelief,
    NotPositiveDefiniteError,
    Observation,
    Track,
)
from .filtering import NoiseSuite
from .learned import DESK_DIMS, FULL_DIMS, LossConstants, NetDims, TrackingNets
from .lifecycle import LifecyclePolicy
from .metrics import evaluate
from .simlab import ScenarioConfig, crossing_benchmark, generate
from .tracker import Tracker, run_sequence

__all__ = [
    "BoxState", "ConfigMismatchError", "Detection", "GaussianBelief", "NotPositiveDefiniteError",
    "Observation", "Track", "NoiseSuite", "DESK_DIMS", "FULL_DIMS", "LossConstants", "NetDims",
    "TrackingNets", "LifecyclePolicy", "evaluate", "ScenarioConfig", "crossing_benchmark",
    "generate", "Tracker", "run_sequence",
]
