"""Command-line entry points: pretrain, run, grid, serve, dump-stream."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .engine import FeedbackSchedule
from .harness import (METHODS, OUTPUT_ROOT_ENV, ExperimentConfig, PretrainSettings,
                      ablation_grid, config_from_dict, pretrain, run_experiment)
from .streams import default_stream_spec, dump_stream, make_shift_stream, spec_from_dict


def _load_experiment_config(args) -> ExperimentConfig:
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = config_from_dict(json.load(fh))
    else:
        config = ExperimentConfig(stream=default_stream_spec())
    if args.method:
        config.method = args.method
    if args.checkpoint:
        config.checkpoint = args.checkpoint
    if args.seeds:
        config.seeds = tuple(int(s) for s in args.seeds.split(","))
    overrides = {}
    for name in ("k", "lr", "alpha", "beta", "epochs", "n_passes"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if overrides:
        config.adapt = replace(config.adapt, **overrides)
    if args.error_rate is not None:
        config.oracle = replace(config.oracle, error_rate=args.error_rate)
    if args.skip_period is not None or args.delay is not None:
        config.schedule = FeedbackSchedule(
            skip_period=args.skip_period or config.schedule.skip_period,
            delay=args.delay if args.delay is not None else config.schedule.delay)
    return config


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config JSON file")
    parser.add_argument("--method", choices=METHODS)
    parser.add_argument("--checkpoint", help="source model checkpoint path")
    parser.add_argument("--seeds", help="comma-separated run seeds")
    parser.add_argument("--k", type=int, help="feedback budget per batch")
    parser.add_argument("--lr", type=float)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--n-passes", dest="n_passes", type=int)
    parser.add_argument("--error-rate", dest="error_rate", type=float)
    parser.add_argument("--skip-period", dest="skip_period", type=int)
    parser.add_argument("--delay", type=int)
    parser.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV} or ./runs)")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fbtta",
        description="Test-time adaptation with binary feedback: desk-scale lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p_pre = sub.add_parser("pretrain", help="train the clean source model")
    p_pre.add_argument("--out", required=True, help="checkpoint output path")
    p_pre.add_argument("--seed", type=int, default=0)
    p_pre.add_argument("--spec", help="stream spec JSON file (default benchmark)")
    p_pre.add_argument("--epochs", type=int, default=PretrainSettings.epochs)
    p_pre.add_argument("--lr", type=float, default=PretrainSettings.lr)

    p_run = sub.add_parser("run", help="run one method over the stream")
    _add_run_flags(p_run)

    p_grid = sub.add_parser("grid", help="ablation grid along one config axis")
    _add_run_flags(p_grid)
    p_grid.add_argument("--axis", required=True,
                        choices=("k", "error_rate", "beta", "n_passes", "selection"))
    p_grid.add_argument("--values", required=True,
                        help="comma-separated axis values")

    p_serve = sub.add_parser("serve", help="live feedback session over HTTP")
    _add_run_flags(p_serve)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8735)
    p_serve.add_argument("--deadline-ms", dest="deadline_ms", type=int, default=30000)
    p_serve.add_argument("--restore", help="session snapshot directory to resume from")
    p_serve.add_argument("--static-dir", dest="static_dir",
                         help="directory with the browser console build")

    p_dump = sub.add_parser("dump-stream", help="materialize a stream to a JSONL file")
    p_dump.add_argument("--out", required=True)
    p_dump.add_argument("--seed", type=int, default=0)
    p_dump.add_argument("--spec", help="stream spec JSON file (default benchmark)")

    args = parser.parse_args(argv)

    if args.command == "pretrain":
        spec = _load_spec(args.spec)
        settings = PretrainSettings(epochs=args.epochs, lr=args.lr)
        _, accuracy = pretrain(spec, settings, args.seed, out_path=args.out)
        print(f"checkpoint written to {args.out} (holdout accuracy {accuracy:.4f})")
        return 0

    if args.command == "dump-stream":
        spec = _load_spec(args.spec)
        stream = make_shift_stream(spec, args.seed)
        dump_stream(spec, args.seed, stream, args.out)
        print(f"wrote {len(stream)} batches to {args.out}")
        return 0

    config = _load_experiment_config(args)
    if args.command == "run":
        summary = run_experiment(config, args.out)
        print(json.dumps(summary, indent=1, sort_keys=True))
        return 0

    if args.command == "grid":
        values = args.values.split(",")
        summary = ablation_grid(config, args.axis, values, args.out)
        print(json.dumps(summary, indent=1, sort_keys=True))
        return 0

    if args.command == "serve":
        from .service import serve_session
        serve_session(config, host=args.host, port=args.port,
                      deadline_ms=args.deadline_ms, out_dir=args.out,
                      restore=args.restore, static_dir=args.static_dir)
        return 0

    raise AssertionError(f"unhandled command {args.command}")


def _load_spec(path):
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            return spec_from_dict(json.load(fh))
    return default_stream_spec()


if __name__ == "__main__":
    sys.exit(main())
