"""Epsilon-prediction backends with exact call accounting, and cross-frame attention.

Two backends share one interface:

* :class:`AnalyticGaussianModel` treats data under condition ``c`` as
  ``N(mu_c, sigma_x^2 I)``. The noisy marginal at a step is then Gaussian and
  the optimal noise prediction has a closed form, which gives exact oracles.
* :class:`SyntheticCostModel` returns trivial outputs but burns a fixed,
  configurable amount of wall time per call and per batch element. Benchmarks
  use it to probe throughput models.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import Condition, DimensionError, EngineConfig
from .scheduler import ScheduleStep


class DenoiserBackend:
    """Base class. Subclasses implement :meth:`_predict` on a ``(B, d)`` array."""

    def __init__(self):
        self.calls = 0
        self.element_evals = 0

    def reset_counters(self) -> None:
        self.calls = 0
        self.element_evals = 0

    def predict_eps_batch(
        self,
        latents: Sequence[np.ndarray] | np.ndarray,
        steps: Sequence[ScheduleStep],
        conds: Sequence[Condition],
    ) -> np.ndarray:
        x = np.atleast_2d(np.asarray(latents, dtype=float))
        B = x.shape[0] if np.size(latents) else 0
        if B == 0:
            raise ValueError("empty batch")
        if not (len(steps) == len(conds) == B):
            raise ValueError(
                f"length mismatch: {B} latents, {len(steps)} steps, {len(conds)} conditions"
            )
        out = self._predict(x, steps, conds)
        self.calls += 1
        self.element_evals += B
        return out

    def _predict(self, x, steps, conds) -> np.ndarray:
        raise NotImplementedError


class AnalyticGaussianModel(DenoiserBackend):
    def __init__(self, data_variance: float = 0.25):
        super().__init__()
        if not data_variance > 0:
            raise ValueError("data_variance must be positive")
        self.data_variance = data_variance

    def _predict(self, x, steps, conds):
        alpha = np.array([s.alpha for s in steps])[:, None]
        beta = np.array([s.beta for s in steps])[:, None]
        mu = np.stack([c.embedding for c in conds])
        if mu.shape != x.shape:
            raise DimensionError(f"condition shape {mu.shape} != latent shape {x.shape}")
        var = alpha * self.data_variance + beta
        return np.sqrt(beta) * (x - np.sqrt(alpha) * mu) / var

    def log_density(self, x: np.ndarray, step: ScheduleStep, cond: Condition) -> float:
        """Log-density of the noisy marginal at ``step``."""
        var = step.alpha * self.data_variance + step.beta
        r = np.asarray(x) - step.sqrt_alpha * cond.embedding
        d = r.size
        return float(-0.5 * (r @ r) / var - 0.5 * d * math.log(2 * math.pi * var))


def busy_wait(seconds: float) -> None:
    if seconds <= 0:
        return
    end = time.perf_counter_ns() + int(seconds * 1e9)
    while time.perf_counter_ns() < end:
        pass


class SyntheticCostModel(DenoiserBackend):
    """Costs are in seconds: ``cost_per_call + B * cost_per_element`` per invocation."""

    def __init__(self, cost_per_call: float = 0.0, cost_per_element: float = 0.0,
                 output_mode: str = "zeros"):
        super().__init__()
        if cost_per_call < 0 or cost_per_element < 0:
            raise ValueError("costs must be non-negative")
        if output_mode not in ("zeros", "passthrough"):
            raise ValueError(f"unknown output_mode {output_mode!r}")
        self.cost_per_call = cost_per_call
        self.cost_per_element = cost_per_element
        self.output_mode = output_mode

    def _predict(self, x, steps, conds):
        busy_wait(self.cost_per_call + x.shape[0] * self.cost_per_element)
        return np.zeros_like(x) if self.output_mode == "zeros" else x.copy()


def make_backend(cfg: EngineConfig) -> DenoiserBackend:
    if cfg.backend == "analytic":
        return AnalyticGaussianModel(cfg.data_variance)
    if cfg.backend == "synthetic":
        return SyntheticCostModel(cfg.cost_per_call_us * 1e-6, cfg.cost_per_element_us * 1e-6)
    raise ValueError(f"unknown backend {cfg.backend!r}")


# --- attention -------------------------------------------------------------


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Scaled dot-product attention, ``softmax(Q K^T / sqrt(d)) V``."""
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise DimensionError("attention operands must be matrices")
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise DimensionError(f"incompatible shapes Q{Q.shape} K{K.shape} V{V.shape}")
    if K.shape[0] == 0:
        raise ValueError("empty key set")
    return softmax_rows(Q @ K.T / math.sqrt(Q.shape[1])) @ V


@dataclass
class AttentionBatch:
    K_batch: np.ndarray
    V_batch: np.ndarray
    provenance: list[tuple[int, int]] = field(default_factory=list)


def cross_frame_attention(Q: np.ndarray, batch: AttentionBatch) -> np.ndarray:
    if not batch.provenance or batch.K_batch.shape[0] == 0:
        raise ValueError("empty attention batch")
    return attention(Q, batch.K_batch, batch.V_batch)


def lift_tokens(latent: np.ndarray, L: int, d_attn: int) -> np.ndarray:
    """Tile a latent cyclically into an ``L x d_attn`` token matrix."""
    if L * d_attn < latent.size:
        raise DimensionError(f"{L}x{d_attn} tokens cannot hold a {latent.size}-vector")
    return np.resize(latent, L * d_attn).reshape(L, d_attn)


def lower_tokens(tokens: np.ndarray, d: int) -> np.ndarray:
    """Inverse of :func:`lift_tokens`: average the tiled copies of each coordinate."""
    flat = tokens.reshape(-1)
    idx = np.arange(flat.size) % d
    return np.bincount(idx, weights=flat, minlength=d) / np.bincount(idx, minlength=d)


def build_attention_batch(inflight: Iterable, L: int, d_attn: int,
                          values: dict[int, np.ndarray] | None = None) -> AttentionBatch:
    """Stack per-frame key/value tokens, ordered by ascending denoising step.

    Keys come from each frame's current latent. Values do too unless
    ``values`` maps ``seq_id`` to another vector (the engine passes the
    frames' noise predictions here).
    """
    frames = sorted(inflight, key=lambda f: f.step_idx)
    if not frames:
        raise ValueError("empty in-flight set")
    keys, vals, prov = [], [], []
    for f in frames:
        keys.append(lift_tokens(f.current, L, d_attn))
        v = f.current if values is None else values[f.seq_id]
        vals.append(lift_tokens(v, L, d_attn))
        prov.append((f.seq_id, f.step_idx))
    return AttentionBatch(np.concatenate(keys), np.concatenate(vals), prov)


def attention_dims(d_latent: int, L: int) -> tuple[int, int]:
    """Token count and width for lifting a ``d_latent`` vector into ``L`` tokens."""
    return L, -(-d_latent // L)
