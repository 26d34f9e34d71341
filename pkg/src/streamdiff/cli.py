"""Command line entry point: ``streamdiff run`` and ``streamdiff bench ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench
from .core import ConfigError, EngineConfig, load_config, validate_config
from .runtime import run_pipeline
from .scheduler import build_schedule
from .streams import StreamGenerator, load_frames

SOURCES = {"static": "static", "dynamic": "dynamic_walk", "periodic": "periodic_static"}


def _source_frames(args, cfg: EngineConfig):
    if args.source == "file":
        if not args.input:
            raise SystemExit("--source file needs --input PATH")
        frames = load_frames(args.input)
        return frames[: args.frames] if args.frames else frames
    gen = StreamGenerator(SOURCES[args.source], d=cfg.d_latent, seed=cfg.seed,
                          noise_scale=0.0 if args.source == "static" else 1.0)
    return gen.frames(args.frames)


def cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else validate_config(EngineConfig())
    frames = _source_frames(args, cfg)
    outputs = []
    trace = open(args.trace, "w") if args.trace else None
    try:
        report = run_pipeline(cfg, frames, outputs.append, mode=args.mode, trace=trace)
    finally:
        if trace:
            trace.close()
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)
    return 0 if report.complete else 1


def cmd_bench(args) -> int:
    which = args.which
    tables = []
    if which in ("stream-batch", "all"):
        tables.append(bench.bench_stream_batch(frames=args.frames, repeats=args.repeats))
    if which in ("guidance", "all"):
        tables.append(bench.bench_guidance(frames=args.frames, repeats=args.repeats))
    if which in ("ssf", "all"):
        for kind in ("periodic_static", "dynamic_walk", "static"):
            t = bench.bench_ssf(StreamGenerator(kind, seed=args.seed), seed=args.seed)
            t.name = f"ssf_{kind}"
            tables.append(t)
    formats = ("csv", "json") if args.format == "both" else (args.format,)
    for path in bench.emit_report(tables, args.out_dir, formats):
        print(path)
    return 0


def cmd_schedule(args) -> int:
    sys.stdout.write(build_schedule(args.n, args.T, args.entry_strength).to_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamdiff")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the streaming pipeline on a frame source")
    run.add_argument("--config", help="JSON config file (EngineConfig keys)")
    run.add_argument("--source", choices=[*SOURCES, "file"], default="dynamic")
    run.add_argument("--input", help="frames file for --source file (.npy or CSV)")
    run.add_argument("--frames", type=int, default=100)
    run.add_argument("--report", help="write the JSON report here instead of stdout")
    run.add_argument("--trace", help="write a JSON-lines tick trace here")
    run.add_argument("--mode", choices=["deterministic", "threaded"], default="deterministic")
    run.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="benchmark tables")
    b.add_argument("which", choices=["stream-batch", "guidance", "ssf", "all"])
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out-dir", default="bench_out")
    b.add_argument("--format", choices=["csv", "json", "both"], default="both")
    b.add_argument("--frames", type=int, default=100)
    b.add_argument("--repeats", type=int, default=5)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("schedule", help="dump the noise schedule as CSV")
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--T", type=int, default=1000)
    s.add_argument("--entry-strength", type=float, default=1.0)
    s.set_defaults(func=cmd_schedule)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
