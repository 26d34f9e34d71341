"""Classifier-free guidance and its residual variants.

Standard CFG needs a negative-condition prediction at every step. Residual
CFG replaces it with a "virtual" residual noise computed in closed form from
a reference point: the input latent itself (self-negative) or an estimate
made once with the negative condition at the entry step (onetime-negative).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Condition, Latent, check_same_dim
from .denoiser import DenoiserBackend
from .scheduler import ScheduleError, ScheduleStep, predict_x0

MODES = ("none", "cfg", "self_negative", "onetime_negative")

# extra element evaluations per frame on top of the n conditional ones
EXTRA_EVALS = {"none": lambda n: 0, "cfg": lambda n: n,
               "self_negative": lambda n: 0, "onetime_negative": lambda n: 1}


def evals_per_frame(mode: str, n: int) -> int:
    return n + EXTRA_EVALS[mode](n)


class GuidanceError(RuntimeError):
    pass


@dataclass(frozen=True)
class GuidanceConfig:
    mode: str = "self_negative"
    gamma: float = 1.4
    delta: float = 1.0
    negative_cond: Optional[Condition] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 <= self.delta <= 1:
            raise ValueError("delta must lie in [0, 1]")
        if self.mode in ("cfg", "onetime_negative") and self.negative_cond is None:
            raise ValueError(f"mode {self.mode!r} needs a negative condition")


@dataclass
class GuidanceState:
    x0_ref: Optional[Latent] = None
    initialized: bool = False


def cfg_combine(eps_neg: Latent, eps_cond: Latent, gamma: float) -> Latent:
    """``eps_neg + gamma * (eps_cond - eps_neg)``, arranged to be exact at gamma 0 and 1."""
    check_same_dim(eps_neg, eps_cond)
    return (1.0 - gamma) * eps_neg + gamma * eps_cond


def virtual_residual_noise(x_tau: Latent, step: ScheduleStep, x0_ref: Latent) -> Latent:
    """Noise that would carry ``x0_ref`` to ``x_tau`` at this step."""
    check_same_dim(x_tau, x0_ref)
    if step.beta <= 0:
        raise ScheduleError(f"no virtual noise at a noiseless step (tau={step.tau})")
    return (x_tau - step.sqrt_alpha * x0_ref) / step.sqrt_beta


def rcfg_combine(eps_virtual: Latent, eps_cond: Latent, gamma: float, delta: float) -> Latent:
    """``delta*v + gamma*(eps_cond - delta*v)``: delta scales both occurrences of ``v``."""
    return cfg_combine(delta * eps_virtual, eps_cond, gamma)


def init_onetime_negative(x_tau0: Latent, step0: ScheduleStep, backend: DenoiserBackend,
                          neg: Condition) -> GuidanceState:
    """One negative-condition prediction at the entry step, turned into a reference x0."""
    if step0.alpha <= 0:
        raise ScheduleError("entry step has alpha = 0")
    eps_neg = backend.predict_eps_batch([x_tau0], [step0], [neg])[0]
    return GuidanceState(x0_ref=predict_x0(x_tau0, step0, eps_neg), initialized=True)


def _combine(mode, gcfg, current, step, eps_cond, eps_neg, x0, gstate):
    if mode == "none" or step.beta <= 0:
        return eps_cond
    if mode == "cfg":
        return cfg_combine(eps_neg, eps_cond, gcfg.gamma)
    if mode == "self_negative":
        ref = x0
    else:
        if gstate is None or not gstate.initialized:
            raise GuidanceError("onetime_negative guidance used before initialization")
        ref = gstate.x0_ref
    eps_virtual = virtual_residual_noise(current, step, ref)
    return rcfg_combine(eps_virtual, eps_cond, gcfg.gamma, gcfg.delta)


def guided_eps(frame, step: ScheduleStep, backend: DenoiserBackend,
               gcfg: GuidanceConfig) -> Latent:
    """Guided noise prediction for one frame, outside of any batching.

    ``frame`` needs ``current``, ``x0``, ``cond``, ``step_idx`` and ``gstate``.
    In onetime-negative mode the frame's state is initialized here at step 0.
    """
    mode = gcfg.mode
    if mode == "onetime_negative" and frame.step_idx == 0 and not frame.gstate.initialized:
        frame.gstate = init_onetime_negative(frame.current, step, backend, gcfg.negative_cond)
    if mode == "cfg":
        eps = backend.predict_eps_batch([frame.current, frame.current], [step, step],
                                        [frame.cond, gcfg.negative_cond])
        eps_cond, eps_neg = eps[0], eps[1]
    else:
        eps_cond, eps_neg = backend.predict_eps_batch([frame.current], [step], [frame.cond])[0], None
    return _combine(mode, gcfg, frame.current, step, eps_cond, eps_neg, frame.x0, frame.gstate)


def guided_eps_batch(
    frames: Sequence,
    steps: Sequence[ScheduleStep],
    backend: DenoiserBackend,
    gcfg: GuidanceConfig,
    mix: Optional[Callable[[Sequence, np.ndarray], np.ndarray]] = None,
) -> list[Latent]:
    """Guided predictions for a whole in-flight batch with a single backend call.

    CFG appends one negative row per frame; onetime-negative appends one
    negative row for every frame that still needs its reference point. ``mix``
    (cross-frame attention) may rewrite the conditional rows before guidance.
    """
    mode = gcfg.mode
    B = len(frames)
    latents = [f.current for f in frames]
    rows_x, rows_s, rows_c = list(latents), list(steps), [f.cond for f in frames]
    neg_row = {}
    for j, f in enumerate(frames):
        needs_neg = mode == "cfg" or (
            mode == "onetime_negative" and not f.gstate.initialized)
        if needs_neg:
            if mode == "onetime_negative" and f.step_idx != 0:
                raise GuidanceError("onetime_negative reference must be built at the entry step")
            neg_row[j] = len(rows_x)
            rows_x.append(latents[j])
            rows_s.append(steps[j])
            rows_c.append(gcfg.negative_cond)
    eps = backend.predict_eps_batch(rows_x, rows_s, rows_c)
    eps_cond = eps[:B]
    if mix is not None:
        eps_cond = mix(frames, eps_cond)
    out = []
    for j, f in enumerate(frames):
        eps_neg = eps[neg_row[j]] if j in neg_row else None
        if mode == "onetime_negative" and j in neg_row:
            f.gstate = GuidanceState(predict_x0(latents[j], steps[j], eps_neg), True)
        out.append(_combine(mode, gcfg, latents[j], steps[j], eps_cond[j], eps_neg, f.x0, f.gstate))
    return out
