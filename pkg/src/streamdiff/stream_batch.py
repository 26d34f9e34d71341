"""Staggered denoising engine plus the sequential and wait-and-batch references.

The engine keeps up to ``n`` frames in flight, each at a different denoising
step. One :meth:`StreamBatchEngine.tick` runs a single batched backend call
that advances every in-flight frame by one step and completes the frame that
was at the last step. A frame ingested when ``tick_count == t`` is emitted by
the tick that brings ``tick_count`` to ``t + n``.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import IO, Optional, Sequence

import numpy as np

from .core import Condition, Latent
from .denoiser import (DenoiserBackend, attention_dims, build_attention_batch,
                       cross_frame_attention, lift_tokens, lower_tokens)
from .guidance import GuidanceConfig, GuidanceState, guided_eps, guided_eps_batch
from .scheduler import LcmParams, NoiseSchedule, consistency_step, forward_diffuse


class EngineError(RuntimeError):
    pass


@dataclass
class InFlightFrame:
    seq_id: int
    x0: Optional[Latent]
    eps0: Optional[Latent]
    current: Optional[Latent]
    step_idx: int
    cond: Optional[Condition]
    gstate: GuidanceState = field(default_factory=GuidanceState)
    ingest_tick: int = 0
    bubble: bool = False


@dataclass
class EmittedFrame:
    seq_id: int
    payload: np.ndarray
    ingest_tick: int
    emit_tick: int
    duplicate: bool = False

    @property
    def latency(self) -> int:
        return self.emit_tick - self.ingest_tick


@dataclass
class TickResult:
    tick: int
    emitted: Optional[EmittedFrame]
    denoiser_calls: int
    element_evals: int
    ingested: Optional[int] = None
    elapsed_ns: int = 0


def _new_frame(seq_id, x0, cond, schedule, eps_cache, tick) -> InFlightFrame:
    x0 = np.asarray(x0, dtype=float)
    x_tau0 = forward_diffuse(x0, schedule[0], eps_cache[0])
    return InFlightFrame(seq_id, x0, eps_cache[0], x_tau0, 0, cond, ingest_tick=tick)


def _advance(frame: InFlightFrame, eps: Latent, schedule, eps_cache, lcm) -> Latent:
    i = frame.step_idx
    last = i == len(schedule) - 1
    return consistency_step(
        frame.current, schedule[i], None if last else schedule[i + 1],
        eps, None if last else eps_cache[i + 1], lcm)


class StreamBatchEngine:
    def __init__(
        self,
        schedule: NoiseSchedule,
        eps_cache: Sequence[Latent],
        backend: DenoiserBackend,
        gcfg: GuidanceConfig,
        lcm: LcmParams = LcmParams(),
        cross_frame_attention: bool = False,
        attention_tokens: int = 2,
        decode=None,
        trace: Optional[IO[str]] = None,
    ):
        if len(eps_cache) != len(schedule):
            raise EngineError(f"{len(eps_cache)} cached noises for {len(schedule)} steps")
        self.schedule = schedule
        self.eps_cache = list(eps_cache)
        self.backend = backend
        self.gcfg = gcfg
        self.lcm = lcm
        self.cross_frame_attention = cross_frame_attention
        self.attention_tokens = attention_tokens
        self.decode = decode
        self.trace = trace
        self.n = len(schedule)
        self.inflight: list[InFlightFrame] = []
        self.tick_count = 0
        self.last_output: Optional[np.ndarray] = None
        self._pending_ingest: Optional[int] = None
        self._next_seq = 0

    # --- ingestion ---------------------------------------------------------

    def _check_slot(self):
        if any(f.step_idx == 0 for f in self.inflight):
            raise EngineError("a frame already occupies step 0; tick before ingesting again")

    def ingest(self, frame_latent: Latent, cond: Condition, seq_id: Optional[int] = None) -> None:
        self._check_slot()
        seq_id = self._next_seq if seq_id is None else seq_id
        self._next_seq = seq_id + 1
        self.inflight.append(_new_frame(seq_id, frame_latent, cond, self.schedule,
                                        self.eps_cache, self.tick_count))
        self._pending_ingest = seq_id

    def ingest_skip(self, seq_id: Optional[int] = None) -> None:
        """Occupy step 0 with a placeholder; it emits a copy of the last output."""
        self._check_slot()
        seq_id = self._next_seq if seq_id is None else seq_id
        self._next_seq = seq_id + 1
        self.inflight.append(InFlightFrame(seq_id, None, None, None, 0, None,
                                           ingest_tick=self.tick_count, bubble=True))
        self._pending_ingest = seq_id

    @property
    def step_indices(self) -> list[int]:
        return sorted(f.step_idx for f in self.inflight)

    def __len__(self) -> int:
        return len(self.inflight)

    # --- ticking -----------------------------------------------------------

    def _mix(self, frames, eps_cond):
        L, d_attn = attention_dims(eps_cond.shape[1], self.attention_tokens)
        values = {f.seq_id: e for f, e in zip(frames, eps_cond)}
        batch = build_attention_batch(frames, L, d_attn, values=values)
        mixed = [lower_tokens(cross_frame_attention(lift_tokens(f.current, L, d_attn), batch),
                              eps_cond.shape[1]) for f in frames]
        return np.stack(mixed)

    def tick(self) -> TickResult:
        if not self.inflight:
            raise EngineError("tick on an empty batch")
        t0 = time.perf_counter_ns()
        calls0, evals0 = self.backend.calls, self.backend.element_evals
        real = [f for f in self.inflight if not f.bubble]
        if real:
            steps = [self.schedule[f.step_idx] for f in real]
            mix = self._mix if self.cross_frame_attention else None
            eps = guided_eps_batch(real, steps, self.backend, self.gcfg, mix=mix)
            for f, e in zip(real, eps):
                f.current = _advance(f, e, self.schedule, self.eps_cache, self.lcm)
        self.tick_count += 1

        emitted = None
        done = [f for f in self.inflight if f.step_idx == self.n - 1]
        for f in done:
            self.inflight.remove(f)
            if f.bubble:
                if self.last_output is None:
                    continue
                payload, dup = self.last_output, True
            else:
                payload = f.current if self.decode is None else self.decode(f.current)
                dup = False
            self.last_output = payload
            emitted = EmittedFrame(f.seq_id, payload, f.ingest_tick, self.tick_count, dup)
        for f in self.inflight:
            f.step_idx += 1

        result = TickResult(
            tick=self.tick_count,
            emitted=emitted,
            denoiser_calls=self.backend.calls - calls0,
            element_evals=self.backend.element_evals - evals0,
            ingested=self._pending_ingest,
            elapsed_ns=time.perf_counter_ns() - t0,
        )
        self._pending_ingest = None
        if self.trace is not None:
            self.trace.write(json.dumps({
                "tick": result.tick,
                "ingested": result.ingested,
                "emitted": None if emitted is None else emitted.seq_id,
                "calls": result.denoiser_calls,
                "element_evals": result.element_evals,
                "elapsed_ns": result.elapsed_ns,
            }) + "\n")
        return result

    def drain(self) -> list[TickResult]:
        results = []
        while self.inflight:
            results.append(self.tick())
        return results


def run_sequential_reference(
    x0: Latent,
    cond: Condition,
    schedule: NoiseSchedule,
    backend: DenoiserBackend,
    gcfg: GuidanceConfig,
    eps_cache: Sequence[Latent],
    lcm: LcmParams = LcmParams(),
) -> Latent:
    """Denoise one frame through all ``n`` steps, one backend call per step."""
    frame = _new_frame(0, x0, cond, schedule, eps_cache, 0)
    for i in range(len(schedule)):
        frame.step_idx = i
        eps = guided_eps(frame, schedule[i], backend, gcfg)
        frame.current = _advance(frame, eps, schedule, eps_cache, lcm)
    return frame.current


def run_wait_and_batch_reference(
    frames: Sequence[Latent],
    cond: Condition,
    schedule: NoiseSchedule,
    backend: DenoiserBackend,
    gcfg: GuidanceConfig,
    eps_cache: Sequence[Latent],
    lcm: LcmParams = LcmParams(),
) -> tuple[list[Latent], list[int]]:
    """Collect all ``m`` frames, then run ``n`` batched steps over them together.

    Frame ``k`` arrives at tick ``k``; collection ends at tick ``m`` and all
    frames are emitted ``n`` ticks later, so frame ``k`` waits ``m + n - k``
    ticks and the first frame waits ``m + n``.
    """
    m = len(frames)
    if m < 1:
        raise EngineError("wait-and-batch needs at least one frame")
    batch = [_new_frame(k, x, cond, schedule, eps_cache, k) for k, x in enumerate(frames)]
    for i in range(len(schedule)):
        for f in batch:
            f.step_idx = i
        eps = guided_eps_batch(batch, [schedule[i]] * m, backend, gcfg)
        for f, e in zip(batch, eps):
            f.current = _advance(f, e, schedule, eps_cache, lcm)
    n = len(schedule)
    return [f.current for f in batch], [m + n - k for k in range(m)]
