"""Track creation and termination policies."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .core import Track

INIT_MODES = ("always", "count_based", "learned")
DEFAULT_MAX_MISSES = 3
SCORE_EMA_WEIGHT = 0.7
SCORE_MISS_DECAY = 0.9


@dataclass(frozen=True)
class LifecyclePolicy:
    init_mode: str = "always"
    k: int = 2
    threshold: float = 0.5
    max_consecutive_misses: int = DEFAULT_MAX_MISSES

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.k < 1:
            raise ValueError("count_based k must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("learned threshold must lie in (0, 1)")
        if self.max_consecutive_misses < 0:
            raise ValueError("max_consecutive_misses must be >= 0")

    @classmethod
    def parse(cls, text: str, max_misses: int = DEFAULT_MAX_MISSES) -> "LifecyclePolicy":
        """From a CLI string: ``always``, ``learned``, ``learned:0.6`` or ``count_based:3``."""
        mode, _, arg = text.partition(":")
        if mode == "count_based":
            return cls("count_based", k=int(arg or 2), max_consecutive_misses=max_misses)
        if mode == "learned":
            return cls("learned", threshold=float(arg or 0.5), max_consecutive_misses=max_misses)
        if arg:
            raise ValueError(f"policy {mode!r} takes no argument")
        return cls(mode, max_consecutive_misses=max_misses)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def decide_init(n_unmatched: int, scores: Optional[Sequence[float]], policy: LifecyclePolicy) -> List[int]:
    """Indices (into the unmatched detections) that start a new track.

    Under count_based every unmatched detection starts a provisional track;
    confirmation is handled by :func:`is_confirmed`.
    """
    if policy.init_mode == "learned":
        if scores is None:
            raise ValueError("learned initialization needs per-detection scores")
        scores = np.asarray(scores, dtype=float)
        if scores.shape != (n_unmatched,):
            raise ValueError(f"expected {n_unmatched} scores, got {scores.shape}")
        return [i for i in range(n_unmatched) if scores[i] > policy.threshold]
    return list(range(n_unmatched))


def starts_confirmed(policy: LifecyclePolicy) -> bool:
    return policy.init_mode != "count_based" or policy.k <= 1


def is_confirmed(track: Track, policy: LifecyclePolicy) -> bool:
    if track.confirmed:
        return True
    return policy.init_mode == "count_based" and track.hits >= policy.k


def decide_terminate(tracks: Sequence[Track], policy: LifecyclePolicy) -> List[int]:
    """Ids of tracks to drop.

    Confirmed tracks go after more than ``max_consecutive_misses`` misses in a
    row; provisional tracks go on their first miss.
    """
    drop = []
    for t in tracks:
        limit = policy.max_consecutive_misses if t.confirmed else 0
        if t.consecutive_misses > limit:
            drop.append(t.id)
    return drop


def matched_score(previous: float, confidence: float) -> float:
    return SCORE_EMA_WEIGHT * confidence + (1.0 - SCORE_EMA_WEIGHT) * previous


def missed_score(previous: float) -> float:
    return previous * SCORE_MISS_DECAY
