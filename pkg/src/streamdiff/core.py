"""Shared domain types, configuration records and the RNG contract.

Latents are plain 1-D ``float64`` numpy arrays. Everything that needs
randomness takes a :class:`numpy.random.Generator` built by :func:`make_rng`
(PCG64). Sample order is part of the reproducibility contract: a generator
seeded with ``seed`` and asked for ``d`` normals always yields the same vector.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np

Latent = np.ndarray

GUIDANCE_MODES = ("none", "cfg", "self_negative", "onetime_negative")
BACKENDS = ("analytic", "synthetic")
LCM_MODES = ("exact", "boundary_approx")
CODECS = ("identity", "affine")


class ConfigError(ValueError):
    """Raised by :func:`validate_config`; ``errors`` lists every violation."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    seq_id: int
    payload: np.ndarray
    tick_in: Optional[int] = None


@dataclass(frozen=True)
class Condition:
    id: str
    embedding: np.ndarray


@dataclass(frozen=True)
class EngineConfig:
    n_steps: int = 4
    guidance_mode: str = "self_negative"
    gamma: float = 1.4
    delta: float = 1.0
    ssf_enabled: bool = False
    eta: float = 0.98
    seed: int = 0
    cross_frame_attention: bool = False
    d_latent: int = 8
    T: int = 1000
    entry_strength: float = 1.0
    lcm_mode: str = "boundary_approx"
    backend: str = "analytic"
    data_variance: float = 0.25
    # synthetic backend costs, microseconds
    cost_per_call_us: float = 0.0
    cost_per_element_us: float = 0.0
    attention_tokens: int = 2
    codec: str = "identity"
    queue_capacity: int = 8
    live: bool = False
    cond_embedding: Optional[tuple] = None
    negative_embedding: Optional[tuple] = None

    def replace(self, **changes) -> "EngineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        for key in ("cond_embedding", "negative_embedding"):
            if out[key] is not None:
                out[key] = list(out[key])
        return out


def make_rng(seed: int, stream: Optional[int] = None) -> np.random.Generator:
    """PCG64 generator. ``stream`` selects an independent substream of ``seed``."""
    entropy = seed if stream is None else [seed, stream]
    return np.random.Generator(np.random.PCG64(entropy))


def sample_gaussian(rng: np.random.Generator, d: int) -> Latent:
    """Draw ``d`` i.i.d. standard normals, advancing ``rng``."""
    if d < 1:
        raise DimensionError(f"invalid dimension {d}")
    return rng.standard_normal(d)


def check_same_dim(*vectors: np.ndarray) -> None:
    shapes = {np.shape(v) for v in vectors}
    if len(shapes) != 1:
        raise DimensionError(f"dimension mismatch: {sorted(shapes)}")


def validate_config(cfg: EngineConfig) -> EngineConfig:
    errors = []
    if not isinstance(cfg.n_steps, int) or cfg.n_steps < 1:
        errors.append(f"invalid: n_steps must be >= 1 (got {cfg.n_steps})")
    if not 0.0 <= cfg.eta < 1.0:
        errors.append(f"threshold-out-of-range: eta must lie in [0, 1) (got {cfg.eta})")
    if not cfg.gamma >= 0:
        errors.append(f"invalid: gamma must be >= 0 (got {cfg.gamma})")
    if not 0.0 <= cfg.delta <= 1.0:
        errors.append(f"invalid: delta must lie in [0, 1] (got {cfg.delta})")
    if cfg.guidance_mode not in GUIDANCE_MODES:
        errors.append(f"invalid: unknown guidance_mode {cfg.guidance_mode!r}")
    if cfg.backend not in BACKENDS:
        errors.append(f"invalid: unknown backend {cfg.backend!r}")
    if cfg.lcm_mode not in LCM_MODES:
        errors.append(f"invalid: unknown lcm_mode {cfg.lcm_mode!r}")
    if cfg.codec not in CODECS:
        errors.append(f"invalid: unknown codec {cfg.codec!r}")
    if cfg.d_latent < 1:
        errors.append(f"invalid: d_latent must be >= 1 (got {cfg.d_latent})")
    if isinstance(cfg.n_steps, int) and cfg.n_steps > cfg.T:
        errors.append(f"invalid: n_steps {cfg.n_steps} exceeds grid size T={cfg.T}")
    if not 0.0 < cfg.entry_strength <= 1.0:
        errors.append(f"invalid: entry_strength must lie in (0, 1] (got {cfg.entry_strength})")
    if not cfg.data_variance > 0:
        errors.append(f"invalid: data_variance must be > 0 (got {cfg.data_variance})")
    if cfg.cost_per_call_us < 0 or cfg.cost_per_element_us < 0:
        errors.append("invalid: synthetic costs must be >= 0")
    if cfg.attention_tokens < 1:
        errors.append("invalid: attention_tokens must be >= 1")
    if cfg.queue_capacity < 1:
        errors.append("invalid: queue_capacity must be >= 1")
    for key in ("cond_embedding", "negative_embedding"):
        emb = getattr(cfg, key)
        if emb is None:
            continue
        if len(emb) != cfg.d_latent:
            errors.append(f"invalid: {key} length {len(emb)} != d_latent {cfg.d_latent}")
        elif not all(math.isfinite(v) for v in emb):
            errors.append(f"invalid: {key} has non-finite entries")
    if errors:
        raise ConfigError(errors)
    return cfg


def config_from_dict(data: dict[str, Any]) -> EngineConfig:
    known = {f.name for f in dataclasses.fields(EngineConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError([f"unknown config key {k!r}" for k in unknown])
    data = dict(data)
    for key in ("cond_embedding", "negative_embedding"):
        if data.get(key) is not None:
            data[key] = tuple(float(v) for v in data[key])
    return validate_config(EngineConfig(**data))


def load_config(path: str | Path) -> EngineConfig:
    with open(path) as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ConfigError(["config document must be a JSON object"])
    return config_from_dict(data)


def default_conditions(cfg: EngineConfig) -> tuple[Condition, Condition]:
    """Positive and negative conditions for a config.

    Without explicit embeddings the positive condition mean is the all-ones
    vector and the negative one is its mirror image.
    """
    d = cfg.d_latent
    pos = np.ones(d) if cfg.cond_embedding is None else np.asarray(cfg.cond_embedding, float)
    neg = -np.ones(d) if cfg.negative_embedding is None else np.asarray(cfg.negative_embedding, float)
    return Condition("positive", pos), Condition("negative", neg)


__all__ = [
    "BACKENDS",
    "CODECS",
    "Condition",
    "ConfigError",
    "DimensionError",
    "EngineConfig",
    "Frame",
    "GUIDANCE_MODES",
    "LCM_MODES",
    "Latent",
    "check_same_dim",
    "config_from_dict",
    "default_conditions",
    "load_config",
    "make_rng",
    "sample_gaussian",
    "validate_config",
]
