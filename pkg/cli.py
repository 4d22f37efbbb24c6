#!/usr/bin/env python3
"""
Command-line entry point.

    python cli.py inspect    --preset sparsenet-bc-v1
    python cli.py analyze    --config v1bc.cfg --format csv
    python cli.py solve-path --config v1bc.cfg --budget 1M
    python cli.py train      --config run.cfg --data-dir ./cifar --out runs/r1
    python cli.py eval       --config run.cfg --checkpoint runs/r1/final.spnf --data-dir ./cifar
    python cli.py sweep      --config sweep.cfg --format csv
    python cli.py serve

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from analyzers import REPORT_FORMATS, analyze, emit_report, solve_path
from config import ConfigFile, default_data_dir, load_config, network_spec_from_section, parse_count
from data_pipeline import compute_channel_stats, load_cifar, normalize
from errors import ConfigError, SparseNetError
from sweep import generate_sweep, sweep_spec_from_section
from tensor_core import set_num_workers
from topology import PRESETS, NetworkSpec, build_layer_graph, ensure_valid, preset
from trainer import evaluate_checkpoint, load_datasets, read_normalization, train, train_config_from_section

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage problems with exit code 1."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_budget(text: str) -> int:
    try:
        return parse_count(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def _add_model_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Configuration file with a [model] section")
    parser.add_argument("--preset", choices=PRESETS, help="Named model configuration")


def _add_data_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data-dir", default=default_data_dir(),
                        help="CIFAR binary directory (default: $SPARSENET_DATA_DIR)")
    parser.add_argument("--limit", type=int, help="Use only the first N images of each split")


def build_parser() -> UsageParser:
    parser = UsageParser(prog="sparsenet", description="SparseNet topology, analysis and training")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--workers", type=int, default=None,
                        help="Worker threads for ops and data prefetch (default: $SPARSENET_WORKERS or 1)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("inspect", help="Print per-layer sources and channel counts")
    _add_model_args(p)

    p = sub.add_parser("analyze", help="Parameter, FLOP and connection counts")
    _add_model_args(p)
    p.add_argument("--format", choices=REPORT_FORMATS, default="text")
    p.add_argument("--input-size", type=int, help="Square input size for FLOP counting")

    p = sub.add_parser("solve-path", help="Largest path that fits a parameter budget")
    _add_model_args(p)
    p.add_argument("--budget", type=parse_budget, required=True)

    p = sub.add_parser("train", help="Train a model and write metrics and checkpoints")
    _add_model_args(p)
    _add_data_args(p)
    p.add_argument("--out", help="Output directory (default: [train] out_dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="Override epochs (milestones scale proportionally)")
    p.add_argument("--wall-time", action="store_true", help="Record wall_seconds in the metrics CSV")

    p = sub.add_parser("eval", help="Evaluate a checkpoint on the test split")
    _add_model_args(p)
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--format", choices=REPORT_FORMATS, default="text")

    p = sub.add_parser("sweep", help="Generate sweep specs with their analysis")
    p.add_argument("--config", required=True, help="Configuration file with a [sweep] section")
    p.add_argument("--format", choices=REPORT_FORMATS, default="csv")
    p.add_argument("--out", help="Also write the CSV to this file")

    p = sub.add_parser("serve", help="Run the HTTP service")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=int(os.environ.get("PORT", 8000)))
    return parser


def _load_file(args: argparse.Namespace) -> Optional[ConfigFile]:
    return load_config(args.config) if getattr(args, "config", None) else None


def _resolve_spec(parser: UsageParser, args: argparse.Namespace, cfg: Optional[ConfigFile]) -> NetworkSpec:
    if args.preset and cfg is not None and cfg.model:
        parser.error("--preset and a [model] section in --config are mutually exclusive")
    if args.preset:
        return preset(args.preset)
    if cfg is None:
        parser.error(f"{args.command}: one of --config or --preset is required")
    if not cfg.model:
        raise ConfigError(f"{cfg.source}: missing [model] section")
    return ensure_valid(network_spec_from_section(cfg.model))


def _require_data_dir(parser: UsageParser, args: argparse.Namespace) -> str:
    if not args.data_dir:
        parser.error(f"{args.command}: --data-dir is required (or set SPARSENET_DATA_DIR)")
    return args.data_dir


def _cmd_inspect(parser, args) -> int:
    spec = _resolve_spec(parser, args, _load_file(args))
    print("\n".join(build_layer_graph(spec).describe()))
    return EXIT_OK


def _cmd_analyze(parser, args) -> int:
    spec = _resolve_spec(parser, args, _load_file(args))
    sys.stdout.write(emit_report([analyze(spec, args.input_size)], args.format))
    return EXIT_OK


def _cmd_solve_path(parser, args) -> int:
    spec = _resolve_spec(parser, args, _load_file(args))
    solution = solve_path(spec, args.budget)
    print(f"path {solution.path}: {solution.params} parameters (budget {args.budget})")
    return EXIT_OK


def _cmd_train(parser, args) -> int:
    cfg = _load_file(args)
    spec = _resolve_spec(parser, args, cfg)
    data_dir = _require_data_dir(parser, args)
    config = train_config_from_section(
        cfg.train if cfg else {},
        seed=args.seed, limit=args.limit, out_dir=args.out,
        record_wall_time=True if args.wall_time else None,
        workers=args.workers,
    )
    if args.epochs is not None:
        config = config.with_epochs(args.epochs)
    train_data, test_data = load_datasets(data_dir, config)
    result = train(spec, config, train_data, test_data)
    print(f"metrics: {result.metrics_path}")
    print(f"final checkpoint: {result.final_checkpoint}")
    if result.final_eval is not None:
        print(f"final test error: {result.final_eval.test_error:.4f}")
    if result.best_eval is not None:
        print(f"best test error: {result.best_eval.test_error:.4f} (epoch {result.best_eval.epoch})")
    return EXIT_OK


def _cmd_eval(parser, args) -> int:
    cfg = _load_file(args)
    spec = _resolve_spec(parser, args, cfg)
    data_dir = _require_data_dir(parser, args)
    dataset = "cifar10" if spec.num_classes == 10 else "cifar100"
    test_data = load_cifar(data_dir, dataset, "test").subset(args.limit)
    stats = read_normalization(Path(args.checkpoint).parent)
    if stats is None:
        logger.warning("No run_config.json next to the checkpoint; normalizing with train-split statistics")
        stats = compute_channel_stats(load_cifar(data_dir, dataset, "train"))
    row = evaluate_checkpoint(args.checkpoint, spec, normalize(test_data, *stats))
    if args.format == "csv":
        print("epoch,test_loss,test_error")
        print(f"{row.epoch},{row.test_loss:.6f},{row.test_error:.6f}")
    elif args.format == "json-lines":
        print(f'{{"epoch": {row.epoch}, "test_loss": {row.test_loss:.6f}, "test_error": {row.test_error:.6f}}}')
    else:
        print(f"epoch {row.epoch}: test loss {row.test_loss:.4f}, test error {row.test_error:.4f}")
    return EXIT_OK


def _cmd_sweep(parser, args) -> int:
    cfg = load_config(args.config)
    if not cfg.sweep:
        raise ConfigError(f"{cfg.source}: missing [sweep] section")
    result = generate_sweep(sweep_spec_from_section(cfg.sweep))
    text = emit_report(result.reports, args.format)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(result.csv(), encoding="utf-8")
    sys.stdout.write(text)
    for name in result.skipped:
        print(f"skipped (over budget): {name}", file=sys.stderr)
    return EXIT_OK


def _cmd_serve(parser, args) -> int:
    import uvicorn

    uvicorn.run("app:app", host=args.host, port=args.port)
    return EXIT_OK


COMMANDS = {
    "inspect": _cmd_inspect,
    "analyze": _cmd_analyze,
    "solve-path": _cmd_solve_path,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "serve": _cmd_serve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(
            level=getattr(logging, args.log_level),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
        if args.workers is not None:
            if args.workers < 1:
                parser.error(f"--workers must be >= 1, got {args.workers}")
            set_num_workers(args.workers)
        return COMMANDS[args.command](parser, args)
    except SystemExit as e:
        if e.code is None:
            return EXIT_OK
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except (SparseNetError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
