"""Stochastic similarity filter.

Each incoming frame is compared with the last frame that was actually
processed. The closer the cosine similarity gets to 1 above the threshold
``eta``, the likelier the frame is skipped. A hard-threshold comparator is
kept alongside for benchmarking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import DimensionError, Frame, make_rng

PROCESS = "process"
SKIP = "skip"

_ZERO_NORM = 1e-12


def _payload(x) -> np.ndarray:
    return np.asarray(x.payload if isinstance(x, Frame) else x, dtype=float)


def cosine_similarity(a, b) -> float:
    a, b = _payload(a), _payload(b)
    if a.shape != b.shape:
        raise DimensionError(f"payload length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < _ZERO_NORM or nb < _ZERO_NORM:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def skip_probability(sim: float, eta: float) -> float:
    if not 0.0 <= eta < 1.0:
        raise ValueError(f"threshold-out-of-range: eta must lie in [0, 1), got {eta}")
    return min(1.0, max(0.0, (sim - eta) / (1.0 - eta)))


@dataclass
class SsfState:
    eta: float = 0.98
    seed: int = 0
    ref_frame: Optional[Frame] = None
    examined: int = 0
    skipped: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        skip_probability(0.0, self.eta)
        self.rng = make_rng(self.seed)

    @property
    def processed(self) -> int:
        return self.examined - self.skipped


def gate(state: SsfState, frame) -> str:
    """Decide whether ``frame`` is processed or skipped.

    One uniform draw is consumed per examined frame once a reference exists,
    whether or not the skip probability is zero, so the decision sequence
    depends only on the seed and the frames.
    """
    state.examined += 1
    if state.ref_frame is None:
        state.ref_frame = frame
        return PROCESS
    p = skip_probability(cosine_similarity(frame, state.ref_frame), state.eta)
    u = state.rng.random()
    if u < p:
        state.skipped += 1
        return SKIP
    state.ref_frame = frame
    return PROCESS


@dataclass
class HardThresholdFilter:
    """Deterministic comparator: skip iff similarity to the reference exceeds ``eta``."""

    eta: float = 0.98
    ref_frame: Optional[Frame] = None
    examined: int = 0
    skipped: int = 0

    def gate(self, frame) -> str:
        self.examined += 1
        if self.ref_frame is not None and cosine_similarity(frame, self.ref_frame) > self.eta:
            self.skipped += 1
            return SKIP
        self.ref_frame = frame
        return PROCESS


def longest_skip_run(decisions) -> int:
    best = run = 0
    for d in decisions:
        run = run + 1 if d == SKIP else 0
        best = max(best, run)
    return best
