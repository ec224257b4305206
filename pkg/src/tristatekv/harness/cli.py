"""Command-line entry point: ``tristatekv {run,compare,replay,validate-trace,export-trace}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from ..errors import ConfigurationError, TraceError, TriStateError
from .config import load_config
from .replay import export_trace
from .runner import (
    build_model,
    render_text,
    run_synthetic,
    run_trace,
    synthetic_prompt,
    write_replay_reports,
    write_reports,
)
from .trace import TraceShapeError, read_trace, validate_trace, write_trace

EXIT_OK = 0
EXIT_INVALID_TRACE = 1
EXIT_CONFIG = 2
EXIT_TRACE_IO = 3
EXIT_SHAPE = 4
EXIT_INTERNAL = 5

log = logging.getLogger("tristatekv")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override model and workload seeds")
    p.add_argument("--budget", type=int, help="override every strategy's budget")
    p.add_argument("--out", "-o", help="output directory (default: report.out_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tristatekv", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("run", help="run the configured strategies"))
    _add_common(sub.add_parser("compare", help="run strategies paired against base"))

    rp = sub.add_parser("replay", help="replay the policy over an attention trace")
    _add_common(rp)
    rp.add_argument("--trace", "-t", help="trace file (overrides the config workload)")

    vp = sub.add_parser("validate-trace", help="check an attention trace file")
    vp.add_argument("trace")
    vp.add_argument("--window", type=int)

    ep = sub.add_parser("export-trace", help="record the model's attention as a trace file")
    _add_common(ep)
    ep.add_argument("--every", type=int, default=16, help="record every N decode steps")
    ep.add_argument("--trace", "-t", required=True, help="output trace path")
    return parser


def _load(args):
    cfg = load_config(args.config).with_overrides(args.seed, args.budget)
    return cfg, Path(args.out or cfg.report.out_dir)


def _dispatch(args) -> int:
    if args.command == "validate-trace":
        trace = read_trace(args.trace)
        problems = validate_trace(trace, args.window)
        print(
            f"{args.trace}: layers={trace.n_layers} heads={trace.n_heads} kv_heads={trace.n_kv_heads}"
            f" window={trace.window} records={len(trace.records)}"
        )
        for p in problems:
            print(f"  problem: {p}")
        return EXIT_INVALID_TRACE if problems else EXIT_OK

    cfg, out = _load(args)
    if args.command == "export-trace":
        if cfg.synthetic is None:
            raise ConfigurationError("export-trace needs a synthetic workload")
        model = build_model(cfg)
        wl = cfg.synthetic
        prompt = synthetic_prompt(model.cfg.vocab_size, wl.seed, wl.prompt_len)
        write_trace(args.trace, export_trace(model, prompt, wl.gen_len, cfg.strategies[0], args.every))
        print(f"wrote {args.trace}")
        return EXIT_OK

    if args.command == "replay" or (cfg.trace is not None and args.command == "run"):
        results = run_trace(cfg, getattr(args, "trace", None))
        for p in write_replay_reports(results, cfg, out):
            print(f"wrote {p}")
        return EXIT_OK

    if cfg.synthetic is None:
        raise ConfigurationError(f"{args.command} needs a synthetic workload")
    results = run_synthetic(cfg, pair=args.command == "compare")
    paths = write_reports(results, cfg, out)
    sys.stdout.write(render_text(results))
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceShapeError as exc:
        print(f"trace shape error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except TraceError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_TRACE_IO
    except TriStateError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
