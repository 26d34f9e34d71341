"""Noise schedule, forward perturbation, x0 prediction and LCM parameterization."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Latent, check_same_dim

BETA_START = 1e-4
BETA_END = 2e-2


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleStep:
    tau: int
    alpha: float
    beta: float

    @property
    def sqrt_alpha(self) -> float:
        return math.sqrt(self.alpha)

    @property
    def sqrt_beta(self) -> float:
        return math.sqrt(self.beta)


@dataclass(frozen=True)
class NoiseSchedule:
    steps: tuple[ScheduleStep, ...]
    T_grid: int

    def __len__(self) -> int:
        return len(self.steps)

    def __getitem__(self, i: int) -> ScheduleStep:
        return self.steps[i]

    def __iter__(self):
        return iter(self.steps)

    @property
    def taus(self) -> list[int]:
        return [s.tau for s in self.steps]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["i", "tau", "alpha", "beta"])
        for i, s in enumerate(self.steps):
            w.writerow([i, s.tau, repr(s.alpha), repr(s.beta)])
        return buf.getvalue()


@dataclass(frozen=True)
class LcmParams:
    sigma_data: float = 0.5
    s: float = 10.0
    mode: str = "boundary_approx"

    def __post_init__(self):
        if not self.sigma_data > 0 or not self.s > 0:
            raise ScheduleError("sigma_data and s must be positive")
        if self.mode not in ("exact", "boundary_approx"):
            raise ScheduleError(f"unknown LCM mode {self.mode!r}")


def alpha_bar_table(T: int) -> np.ndarray:
    """Cumulative product of ``1 - beta_t`` for a linear beta ramp over ``T`` steps."""
    betas = np.linspace(BETA_START, BETA_END, T)
    return np.cumprod(1.0 - betas)


def step_at(tau: int, alpha_bar: np.ndarray) -> ScheduleStep:
    alpha = float(alpha_bar[tau])
    return ScheduleStep(tau=int(tau), alpha=alpha, beta=1.0 - alpha)


def build_schedule(n: int, T: int = 1000, entry_strength: float = 1.0) -> NoiseSchedule:
    """Select ``n`` evenly spaced timesteps from the entry point down toward 0.

    The entry timestep is ``round(entry_strength * (T - 1))``; step ``i`` sits at
    ``tau0 - floor(i * (tau0 + 1) / n)``, so rounding always favours the larger
    timestep.
    """
    if n < 1 or n > T:
        raise ScheduleError(f"need 1 <= n <= T, got n={n}, T={T}")
    if not 0.0 < entry_strength <= 1.0:
        raise ScheduleError(f"entry_strength must lie in (0, 1], got {entry_strength}")
    tau0 = int(round(entry_strength * (T - 1)))
    if n > tau0 + 1:
        raise ScheduleError(f"cannot place {n} distinct steps below tau0={tau0}")
    alpha_bar = alpha_bar_table(T)
    taus = [tau0 - (i * (tau0 + 1)) // n for i in range(n)]
    return NoiseSchedule(tuple(step_at(t, alpha_bar) for t in taus), T)


def forward_diffuse(x0: Latent, step: ScheduleStep, eps: Latent) -> Latent:
    check_same_dim(x0, eps)
    return step.sqrt_alpha * x0 + step.sqrt_beta * eps


def predict_x0(x_tau: Latent, step: ScheduleStep, eps_pred: Latent) -> Latent:
    check_same_dim(x_tau, eps_pred)
    if step.alpha <= 0:
        raise ScheduleError(f"singular step: alpha=0 at tau={step.tau}")
    return (x_tau - step.sqrt_beta * eps_pred) / step.sqrt_alpha


def lcm_coefficients(step: ScheduleStep, p: LcmParams = LcmParams()) -> tuple[float, float]:
    """Return ``(c_skip, c_out)`` for the consistency-model parameterization."""
    tau = step.tau
    if p.mode == "boundary_approx":
        return (1.0, 0.0) if tau == 0 else (0.0, 1.0)
    st = p.s * tau
    sd2 = p.sigma_data**2
    c_skip = sd2 / (st**2 + sd2)
    c_out = p.sigma_data * st / math.sqrt(sd2 + st**2)
    return c_skip, c_out


def consistency_step(
    x_tau: Latent,
    step_i: ScheduleStep,
    step_next: Optional[ScheduleStep],
    eps_pred: Latent,
    eps_cached: Optional[Latent],
    p: LcmParams = LcmParams(),
) -> Latent:
    """One multi-step consistency sampling move.

    ``step_next=None`` marks the terminal transition: the denoised estimate is
    returned as is. Otherwise it is re-noised to ``step_next`` with the cached
    noise for that step.
    """
    c_skip, c_out = lcm_coefficients(step_i, p)
    x0_hat = c_skip * x_tau + c_out * predict_x0(x_tau, step_i, eps_pred)
    if step_next is None:
        return x0_hat
    if step_next.tau >= step_i.tau:
        raise ScheduleError(f"step_next tau={step_next.tau} is not after tau={step_i.tau}")
    return forward_diffuse(x0_hat, step_next, eps_cached)
