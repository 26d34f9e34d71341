"""Pipeline assembly: input stage, similarity gate, codec, engine stage, output stage.

Two drivers share the same stages:

* ``deterministic`` runs everything round-robin on one thread, one virtual
  tick per source frame. Latencies come out in ticks and are exact.
* ``threaded`` runs pre-processing, the engine and post-processing on three
  threads connected only by :class:`BoundedQueue` instances.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import IO, Callable, Iterable, Optional

import numpy as np

from .core import Condition, EngineConfig, Frame, Latent, default_conditions, make_rng, validate_config
from .denoiser import DenoiserBackend, make_backend
from .guidance import GuidanceConfig
from .scheduler import LcmParams, NoiseSchedule, build_schedule
from .ssf import PROCESS, SsfState, gate
from .stream_batch import StreamBatchEngine

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# substreams of the config seed
NOISE_STREAM, SSF_STREAM, CODEC_STREAM = 0, 1, 2


class BoundedQueue:
    """Thread-safe FIFO with a hard capacity.

    A non-blocking :meth:`put` on a full queue drops the oldest retained item.
    A blocking put waits for room instead (strict mode, nothing is lost).
    """

    def __init__(self, capacity: int = 8):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque = deque()
        self._cond = threading.Condition()
        self.enqueued = 0
        self.dropped = 0

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)

    def put(self, item, block: bool = False, timeout: Optional[float] = None) -> None:
        with self._cond:
            if block:
                if not self._cond.wait_for(lambda: len(self._items) < self.capacity, timeout):
                    raise TimeoutError("queue full")
            elif len(self._items) >= self.capacity:
                self._items.popleft()
                self.dropped += 1
            self._items.append(item)
            self.enqueued += 1
            self._cond.notify_all()

    def get(self, timeout: Optional[float] = 0.0):
        """Oldest item, or ``None`` if nothing arrives within ``timeout``."""
        with self._cond:
            if not self._items and timeout:
                self._cond.wait_for(lambda: bool(self._items), timeout)
            if not self._items:
                return None
            item = self._items.popleft()
            self._cond.notify_all()
            return item

    def get_latest(self, timeout: Optional[float] = 0.0):
        """Newest item; everything older is discarded and counted as dropped."""
        with self._cond:
            if not self._items and timeout:
                self._cond.wait_for(lambda: bool(self._items), timeout)
            if not self._items:
                return None
            item = self._items.pop()
            self.dropped += len(self._items)
            self._items.clear()
            self._cond.notify_all()
            return item


def enqueue_input(q: BoundedQueue, frame) -> None:
    q.put(frame)


def dequeue_latest(q: BoundedQueue):
    return q.get_latest()


class LatentCodec:
    """Stand-in for the image autoencoder: identity, or ``x -> A x + b`` with ``A`` invertible."""

    def __init__(self, kind: str = "identity", A: Optional[np.ndarray] = None,
                 b: Optional[np.ndarray] = None):
        if kind not in ("identity", "affine"):
            raise ValueError(f"unknown codec {kind!r}")
        self.kind = kind
        if kind == "affine":
            A = np.asarray(A, dtype=float)
            if A.ndim != 2 or A.shape[0] != A.shape[1]:
                raise ValueError("affine codec needs a square matrix")
            if np.linalg.matrix_rank(A) < A.shape[0]:
                raise ValueError("affine codec matrix is singular")
            self.A = A
            self.b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=float)

    @classmethod
    def random_affine(cls, d: int, rng: np.random.Generator, scale: float = 0.1) -> "LatentCodec":
        A = np.eye(d) + scale * rng.standard_normal((d, d))
        return cls("affine", A, scale * rng.standard_normal(d))

    def encode(self, x: np.ndarray) -> Latent:
        x = np.asarray(x, dtype=float)
        return x.copy() if self.kind == "identity" else self.A @ x + self.b

    def decode(self, z: Latent) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return z.copy() if self.kind == "identity" else np.linalg.solve(self.A, z - self.b)


@dataclass
class PrecomputeCache:
    schedule: NoiseSchedule
    eps_cached: list
    cond_embeddings: dict
    lcm: LcmParams

    def condition(self, cond_id: str) -> Condition:
        return Condition(cond_id, self.cond_embeddings[cond_id])

    def with_conditions(self, conditions: Iterable[Condition]) -> "PrecomputeCache":
        """New cache whose embeddings are replaced; schedule and noise are kept."""
        embeddings = {c.id: np.array(c.embedding, dtype=float) for c in conditions}
        return PrecomputeCache(self.schedule, self.eps_cached, embeddings, self.lcm)


def build_precompute(cfg: EngineConfig, conditions: Iterable[Condition]) -> PrecomputeCache:
    schedule = build_schedule(cfg.n_steps, cfg.T, cfg.entry_strength)
    rng = make_rng(cfg.seed, stream=NOISE_STREAM)
    eps = [rng.standard_normal(cfg.d_latent) for _ in range(cfg.n_steps)]
    embeddings = {c.id: np.array(c.embedding, dtype=float) for c in conditions}
    return PrecomputeCache(schedule, eps, embeddings, LcmParams(mode=cfg.lcm_mode))


def make_codec(cfg: EngineConfig) -> LatentCodec:
    if cfg.codec == "affine":
        return LatentCodec.random_affine(cfg.d_latent, make_rng(cfg.seed, stream=CODEC_STREAM))
    return LatentCodec()


@dataclass
class MetricsReport:
    schema_version: int = SCHEMA_VERSION
    complete: bool = True
    error: Optional[str] = None
    clock: str = "virtual"
    guidance_mode: str = "none"
    n_steps: int = 0
    frames_in: int = 0
    frames_out: int = 0
    duplicates: int = 0
    ticks: int = 0
    mean_frame_time: float = 0.0
    throughput_fps: float = 0.0
    denoiser_calls: int = 0
    element_evals: int = 0
    work_units: float = 0.0
    examined: int = 0
    skipped: int = 0
    skip_rate: float = 0.0
    drops: int = 0
    latency_min: int = 0
    latency_max: int = 0
    latency_mean: float = 0.0
    evals_by_mode: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Pipeline:
    cfg: EngineConfig
    cache: PrecomputeCache
    backend: DenoiserBackend
    codec: LatentCodec
    engine: StreamBatchEngine
    ssf: Optional[SsfState]
    cond: Condition


def build_pipeline(cfg: EngineConfig, backend: Optional[DenoiserBackend] = None,
                   trace: Optional[IO[str]] = None) -> Pipeline:
    validate_config(cfg)
    pos, neg = default_conditions(cfg)
    cache = build_precompute(cfg, [pos, neg])
    backend = backend or make_backend(cfg)
    codec = make_codec(cfg)
    gcfg = GuidanceConfig(cfg.guidance_mode, cfg.gamma, cfg.delta, cache.condition(neg.id))
    engine = StreamBatchEngine(
        cache.schedule, cache.eps_cached, backend, gcfg, cache.lcm,
        cross_frame_attention=cfg.cross_frame_attention,
        attention_tokens=cfg.attention_tokens, decode=codec.decode, trace=trace)
    ssf = SsfState(cfg.eta, seed=_ssf_seed(cfg)) if cfg.ssf_enabled else None
    return Pipeline(cfg, cache, backend, codec, engine, ssf, cache.condition(pos.id))


def _ssf_seed(cfg: EngineConfig) -> int:
    return int(make_rng(cfg.seed, stream=SSF_STREAM).integers(2**63))


def _preprocess(p: Pipeline, frame: Frame):
    """Gate then encode. Returns ``(seq_id, latent or None)``; ``None`` marks a skip."""
    if p.ssf is not None and gate(p.ssf, frame) != PROCESS:
        return frame.seq_id, None
    return frame.seq_id, p.codec.encode(frame.payload)


def _ingest(p: Pipeline, item) -> None:
    seq_id, latent = item
    if latent is None:
        p.engine.ingest_skip(seq_id)
    else:
        p.engine.ingest(latent, p.cond, seq_id)


def run_pipeline(
    cfg: EngineConfig,
    source: Iterable[Frame],
    sink: Callable[[Frame], None],
    mode: str = "deterministic",
    backend: Optional[DenoiserBackend] = None,
    trace: Optional[IO[str]] = None,
    pace: float = 0.0,
) -> MetricsReport:
    """Drive all stages until ``source`` is exhausted and the engine has drained.

    Frames reach ``sink`` in increasing ``seq_id`` order with ``tick_in`` set to
    the emit tick. ``pace`` (seconds per frame) throttles the source in
    threaded mode. A failing stage stops the run; the report comes back with
    ``complete=False`` and the error message.
    """
    p = build_pipeline(cfg, backend, trace)
    if mode == "deterministic":
        report, stamps = _run_deterministic(p, source, sink)
        report.clock = "virtual"
    elif mode == "threaded":
        report, stamps = _run_threaded(p, source, sink, pace)
        report.clock = "wall"
    else:
        raise ValueError(f"unknown mode {mode!r}")
    _finish_report(report, p, stamps)
    return report


def _collect(p: Pipeline, report: MetricsReport, latencies, result):
    report.ticks += 1
    report.denoiser_calls += result.denoiser_calls
    report.element_evals += result.element_evals
    e = result.emitted
    if e is not None:
        latencies.append(e.latency)
    return e


def _run_deterministic(p: Pipeline, source, sink):
    in_q = BoundedQueue(p.cfg.queue_capacity)
    out_q = BoundedQueue(max(p.cfg.queue_capacity, in_q.capacity))
    report = MetricsReport()
    latencies, stamps = [], []
    take = in_q.get_latest if p.cfg.live else in_q.get

    def post():
        while (e := out_q.get()) is not None:
            sink(Frame(e.seq_id, e.payload, e.emit_tick))
            report.frames_out += 1
            report.duplicates += e.duplicate
            stamps.append(e.emit_tick)

    def step():
        e = _collect(p, report, latencies, p.engine.tick())
        if e is not None:
            out_q.put(e, block=True, timeout=1.0)

    try:
        for frame in source:
            report.frames_in += 1
            in_q.put(_preprocess(p, frame))
            item = take()
            if item is not None:
                _ingest(p, item)
            if len(p.engine):
                step()
            post()
        while len(in_q) or len(p.engine):
            item = in_q.get()
            if item is not None:
                _ingest(p, item)
            step()
            post()
    except Exception as exc:
        log.exception("pipeline stage failed")
        report.complete = False
        report.error = f"{type(exc).__name__}: {exc}"
    report.drops = in_q.dropped
    report._latencies = latencies
    return report, stamps


def _run_threaded(p: Pipeline, source, sink, pace: float):
    in_q = BoundedQueue(p.cfg.queue_capacity)
    out_q = BoundedQueue(max(p.cfg.queue_capacity, in_q.capacity))
    report = MetricsReport()
    latencies, stamps = [], []
    errors: list[BaseException] = []
    source_done = threading.Event()
    engine_done = threading.Event()
    strict = not p.cfg.live

    def pre_stage():
        try:
            nxt = time.perf_counter()
            for frame in source:
                if errors:
                    return
                if pace:
                    nxt += pace
                    while time.perf_counter() < nxt:
                        time.sleep(min(pace, 1e-3))
                report.frames_in += 1
                in_q.put(_preprocess(p, frame), block=strict, timeout=None)
        except BaseException as exc:
            errors.append(exc)
        finally:
            source_done.set()

    def engine_stage():
        take = in_q.get if strict else in_q.get_latest
        try:
            while not errors:
                item = take(timeout=0.01)
                if item is not None:
                    _ingest(p, item)
                elif source_done.is_set() and not len(in_q) and not len(p.engine):
                    break
                if len(p.engine):
                    e = _collect(p, report, latencies, p.engine.tick())
                    if e is not None:
                        out_q.put(e, block=True)
        except BaseException as exc:
            errors.append(exc)
        finally:
            engine_done.set()

    def post_stage():
        try:
            while True:
                e = out_q.get(timeout=0.01)
                if e is None:
                    if engine_done.is_set() and not len(out_q):
                        break
                    continue
                sink(Frame(e.seq_id, e.payload, e.emit_tick))
                report.frames_out += 1
                report.duplicates += e.duplicate
                stamps.append(time.perf_counter())
        except BaseException as exc:
            errors.append(exc)

    threads = [threading.Thread(target=f, name=f.__name__, daemon=True)
               for f in (pre_stage, engine_stage, post_stage)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        exc = errors[0]
        report.complete = False
        report.error = f"{type(exc).__name__}: {exc}"
    report.drops = in_q.dropped
    report._latencies = latencies
    return report, stamps


def _finish_report(report: MetricsReport, p: Pipeline, stamps) -> None:
    latencies = report.__dict__.pop("_latencies", [])
    report.guidance_mode = p.cfg.guidance_mode
    report.n_steps = p.cfg.n_steps
    report.work_units = float(report.element_evals)
    report.evals_by_mode = {p.cfg.guidance_mode: report.element_evals}
    if p.ssf is not None:
        report.examined, report.skipped = p.ssf.examined, p.ssf.skipped
    else:
        report.examined = report.frames_in
    report.skip_rate = report.skipped / report.examined if report.examined else 0.0
    if latencies:
        report.latency_min = int(min(latencies))
        report.latency_max = int(max(latencies))
        report.latency_mean = float(np.mean(latencies))
    if len(stamps) >= 2:
        report.mean_frame_time = float((stamps[-1] - stamps[0]) / (len(stamps) - 1))
        if report.mean_frame_time > 0:
            report.throughput_fps = 1.0 / report.mean_frame_time
