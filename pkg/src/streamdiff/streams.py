"""Deterministic synthetic input streams."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Frame, make_rng

KINDS = ("static", "dynamic_walk", "periodic_static")


@dataclass(frozen=True)
class StreamGenerator:
    """Frame source.

    ``static`` repeats one payload (plus optional ``noise_scale`` jitter).
    ``dynamic_walk`` follows ``x' = sqrt(1 - s^2) x + s z`` with
    ``s = noise_scale``; ``s = 1`` gives independent frames.
    ``periodic_static`` alternates a dynamic window and a static window
    within every ``period`` frames, the static share set by ``static_fraction``.
    """

    kind: str = "dynamic_walk"
    d: int = 8
    seed: int = 0
    noise_scale: float = 1.0
    period: int = 40
    static_fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown stream kind {self.kind!r}")
        if self.d < 1 or self.period < 1 or not 0 <= self.static_fraction <= 1:
            raise ValueError("invalid stream parameters")

    def payloads(self, count: int) -> np.ndarray:
        rng = make_rng(self.seed, stream=7)
        out = np.empty((count, self.d))
        if self.kind == "static":
            base = rng.standard_normal(self.d)
            for i in range(count):
                out[i] = base + self.noise_scale * rng.standard_normal(self.d)
            return out
        if self.kind == "dynamic_walk":
            s = min(max(self.noise_scale, 0.0), 1.0)
            x = rng.standard_normal(self.d)
            for i in range(count):
                out[i] = x
                x = np.sqrt(1 - s * s) * x + s * rng.standard_normal(self.d)
            return out
        n_static = int(round(self.period * self.static_fraction))
        held = None
        for i in range(count):
            phase = i % self.period
            if phase < self.period - n_static:
                out[i] = rng.standard_normal(self.d)
            else:
                if phase == self.period - n_static:
                    held = rng.standard_normal(self.d)
                out[i] = held
        return out

    def frames(self, count: int) -> list[Frame]:
        return [Frame(i, p) for i, p in enumerate(self.payloads(count))]


def load_frames(path: str | Path) -> list[Frame]:
    """Frames from a ``.npy`` array or a headerless CSV, one frame per row."""
    path = Path(path)
    if path.suffix == ".npy":
        data = np.load(path)
    else:
        data = np.loadtxt(path, delimiter=",", ndmin=2)
    data = np.atleast_2d(np.asarray(data, dtype=float))
    return [Frame(i, row) for i, row in enumerate(data)]
