"""Benchmark tables: stream batch vs sequential, guidance variants, similarity filter.

Timing tables drive the engine directly on the calling thread with the
synthetic-cost backend. Every timed configuration gets one warm-up run and
``repeats`` measured runs of ``frames`` steady-state frames each; the table
reports the median and the mean per-frame time next to the cost-model value.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Condition, EngineConfig, make_rng
from .denoiser import AnalyticGaussianModel, SyntheticCostModel
from .guidance import GuidanceConfig
from .runtime import SCHEMA_VERSION, run_pipeline
from .scheduler import build_schedule
from .ssf import HardThresholdFilter, SsfState, gate, longest_skip_run
from .stream_batch import StreamBatchEngine, run_sequential_reference
from .streams import StreamGenerator

DEFAULT_N_LIST = (1, 2, 4, 10)
GUIDANCE_N_LIST = (1, 2, 3, 4, 5)
GUIDANCE_MODES = ("cfg", "self_negative", "onetime_negative")


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def row(self, **match) -> dict:
        for r in self.rows:
            if all(r[k] == v for k, v in match.items()):
                return r
        raise KeyError(match)


def model_sequential(n: int, c_call: float, c_elem: float) -> float:
    return n * (c_call + c_elem)


def model_stream(n: int, c_call: float, c_elem: float, rows_per_frame: Optional[int] = None) -> float:
    return c_call + (n if rows_per_frame is None else rows_per_frame) * c_elem


def _setup(n: int, d: int, seed: int, mode: str):
    schedule = build_schedule(n)
    rng = make_rng(seed)
    eps = [rng.standard_normal(d) for _ in range(n)]
    cond = Condition("positive", np.ones(d))
    gcfg = GuidanceConfig(mode, 1.4, 1.0, Condition("negative", -np.ones(d)))
    frames = [rng.standard_normal(d) for _ in range(8)]
    return schedule, eps, cond, gcfg, frames


def time_stream_batch(n, backend, mode="none", frames=100, d=8, seed=0) -> float:
    """Seconds per frame once the staggered batch is full."""
    schedule, eps, cond, gcfg, xs = _setup(n, d, seed, mode)
    engine = StreamBatchEngine(schedule, eps, backend, gcfg)
    for k in range(n - 1):
        engine.ingest(xs[k % len(xs)], cond)
        engine.tick()
    t0 = time.perf_counter()
    for k in range(frames):
        engine.ingest(xs[k % len(xs)], cond)
        engine.tick()
    return (time.perf_counter() - t0) / frames


def time_sequential(n, backend, mode="none", frames=100, d=8, seed=0) -> float:
    schedule, eps, cond, gcfg, xs = _setup(n, d, seed, mode)
    t0 = time.perf_counter()
    for k in range(frames):
        run_sequential_reference(xs[k % len(xs)], cond, schedule, backend, gcfg, eps)
    return (time.perf_counter() - t0) / frames


def _measure(fn, repeats: int, warmup: int = 1) -> tuple[float, float]:
    for _ in range(warmup):
        fn()
    samples = [fn() for _ in range(repeats)]
    return statistics.median(samples), statistics.fmean(samples)


def bench_stream_batch(
    n_list: Sequence[int] = DEFAULT_N_LIST,
    cost_per_call: float = 9e-3,
    cost_per_element: float = 1e-3,
    frames: int = 100,
    repeats: int = 5,
) -> Table:
    backend = SyntheticCostModel(cost_per_call, cost_per_element)
    table = Table("stream_batch", [
        "n", "sequential_ms", "stream_ms", "speedup", "sequential_mean_ms", "stream_mean_ms",
        "model_sequential_ms", "model_stream_ms", "model_speedup", "speedup_rel_error"])
    for n in n_list:
        seq_med, seq_mean = _measure(lambda: time_sequential(n, backend, frames=frames), repeats)
        st_med, st_mean = _measure(lambda: time_stream_batch(n, backend, frames=frames), repeats)
        m_seq = model_sequential(n, cost_per_call, cost_per_element)
        m_st = model_stream(n, cost_per_call, cost_per_element)
        speedup = seq_med / st_med
        table.rows.append({
            "n": n,
            "sequential_ms": seq_med * 1e3,
            "stream_ms": st_med * 1e3,
            "speedup": speedup,
            "sequential_mean_ms": seq_mean * 1e3,
            "stream_mean_ms": st_mean * 1e3,
            "model_sequential_ms": m_seq * 1e3,
            "model_stream_ms": m_st * 1e3,
            "model_speedup": m_seq / m_st,
            "speedup_rel_error": abs(speedup - m_seq / m_st) / (m_seq / m_st),
        })
    return table


def count_evals_per_frame(n: int, mode: str, frames: int = 20, d: int = 8, seed: int = 0) -> int:
    """Element evaluations per frame from backend counters over a full engine run."""
    backend = AnalyticGaussianModel()
    schedule, eps, cond, gcfg, xs = _setup(n, d, seed, mode)
    engine = StreamBatchEngine(schedule, eps, backend, gcfg)
    for k in range(frames):
        engine.ingest(xs[k % len(xs)], cond)
        engine.tick()
    engine.drain()
    total = backend.element_evals
    if total % frames:
        raise AssertionError(f"{total} evaluations do not split evenly over {frames} frames")
    return total // frames


def bench_guidance(
    n_list: Sequence[int] = GUIDANCE_N_LIST,
    cost_per_call: float = 5e-5,
    cost_per_element: float = 1e-3,
    frames: int = 100,
    repeats: int = 5,
) -> Table:
    backend = SyntheticCostModel(cost_per_call, cost_per_element)
    cols = ["n"]
    for m in GUIDANCE_MODES:
        cols += [f"evals_{m}", f"{m}_ms", f"model_{m}_ms"]
    cols += ["ratio_cfg_over_self_negative", "ratio_cfg_over_onetime_negative"]
    table = Table("guidance", cols)
    for n in n_list:
        row = {"n": n}
        for m in GUIDANCE_MODES:
            evals = count_evals_per_frame(n, m)
            med, _ = _measure(lambda: time_stream_batch(n, backend, m, frames=frames), repeats)
            row[f"evals_{m}"] = evals
            row[f"{m}_ms"] = med * 1e3
            row[f"model_{m}_ms"] = model_stream(n, cost_per_call, cost_per_element, evals) * 1e3
        row["ratio_cfg_over_self_negative"] = row["cfg_ms"] / row["self_negative_ms"]
        row["ratio_cfg_over_onetime_negative"] = row["cfg_ms"] / row["onetime_negative_ms"]
        table.rows.append(row)
    return table


def _work_series(cfg: EngineConfig, frames, window: int):
    trace = io.StringIO()
    report = run_pipeline(cfg, frames, lambda f: None, trace=trace)
    per_tick = [json.loads(line)["element_evals"] for line in trace.getvalue().splitlines()]
    series = [sum(per_tick[i:i + window]) for i in range(0, len(per_tick), window)]
    return report, series


def bench_ssf(
    gen: StreamGenerator = StreamGenerator("periodic_static"),
    eta: float = 0.98,
    frames: int = 200,
    n: int = 2,
    window: int = 10,
    seed: int = 0,
) -> Table:
    """Denoiser work per window with and without the filter on one stream."""
    stream = gen.frames(frames)
    base = EngineConfig(n_steps=n, guidance_mode="self_negative", eta=eta, seed=seed,
                        d_latent=gen.d)
    off, series_off = _work_series(base, stream, window)
    on, series_on = _work_series(base.replace(ssf_enabled=True), stream, window)
    series_on += [0] * (len(series_off) - len(series_on))
    table = Table("ssf", ["window", "work_units_off", "work_units_on"])
    for w, (a, b) in enumerate(zip(series_off, series_on)):
        table.rows.append({"window": w, "work_units_off": a, "work_units_on": b})

    hard = HardThresholdFilter(eta)
    soft = SsfState(eta, seed=seed)
    hard_runs = longest_skip_run([hard.gate(f) for f in stream])
    soft_runs = longest_skip_run([gate(soft, f) for f in stream])
    table.summary = {
        "stream": gen.kind,
        "frames": frames,
        "eta": eta,
        "n": n,
        "examined": on.examined,
        "skipped": on.skipped,
        "skip_rate": on.skip_rate,
        "work_units_off": off.work_units,
        "work_units_on": on.work_units,
        "work_units_saved": off.work_units - on.work_units,
        "reduction": off.work_units / on.work_units if on.work_units else float("inf"),
        "longest_skip_run_ssf": soft_runs,
        "longest_skip_run_hard": hard_runs,
    }
    return table


# --- report files ------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def table_to_csv(table: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    w.writerow(table.columns)
    for r in table.rows:
        w.writerow([_fmt(r[c]) for c in table.columns])
    return buf.getvalue()


def table_to_json(table: Table) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "table": table.name,
        "columns": table.columns,
        "rows": [[r[c] for c in table.columns] for r in table.rows],
        "summary": table.summary,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def emit_report(tables: Sequence[Table], out_dir: str | Path, formats=("csv", "json")) -> list[Path]:
    if isinstance(formats, str):
        formats = (formats,)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for t in tables:
        for fmt in formats:
            if fmt not in ("csv", "json"):
                raise ValueError(f"unknown format {fmt!r}")
            path = out_dir / f"{t.name}.{fmt}"
            text = table_to_csv(t) if fmt == "csv" else table_to_json(t)
            with open(path, "w", newline="") as f:
                f.write(text)
            written.append(path)
        if t.summary and "csv" in formats:
            path = out_dir / f"{t.name}_summary.csv"
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\r\n")
            w.writerow(["key", "value"])
            for k in sorted(t.summary):
                w.writerow([k, _fmt(t.summary[k])])
            with open(path, "w", newline="") as f:
                f.write(buf.getvalue())
            written.append(path)
    return written
