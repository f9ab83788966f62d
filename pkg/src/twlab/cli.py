"""Command line entry point: ``twlab <subcommand> [flags]``."""

import argparse
import os
import sys

from .gsource import vector_lines
from .harness import ConfigError, ExperimentConfig, run_experiment

SUBCOMMANDS = {"sweep": "sweep", "clt": "clt", "attack": "attack", "validate": "validate",
               "optimal-p": "optimal_p"}

EXIT_OK, EXIT_CONFIG, EXIT_ASSERT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return v


def _threads(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("threads must be >= 1")
    return v


def build_parser():
    parser = _Parser(prog="twlab", description="Tournament watermark simulation lab.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--out", help="output file (default: stdout)")
        p.add_argument("--seed", type=_u64, help="override master_seed")
        p.add_argument("--threads", type=_threads,
                       help="worker threads (default: $TWL_THREADS or 1)")
        p.add_argument("--format", choices=["csv", "json"], default=None)
    v = sub.add_parser("vectors", help="print PRF test vectors")
    v.add_argument("--out", help="output file (default: stdout)")
    return parser


def _load_config(args, kind):
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = ExperimentConfig.from_json(fh.read())
        except OSError as err:
            raise ConfigError(f"--config: {err}") from None
        if cfg.experiment != kind:
            raise ConfigError(f"experiment: config is for {cfg.experiment!r}, not {kind!r}")
    else:
        cfg = ExperimentConfig.from_dict({"experiment": kind})
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _emit(text, out):
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "vectors":
        _emit("".join(line + "\n" for line in vector_lines()), args.out)
        return EXIT_OK
    try:
        cfg = _load_config(args, SUBCOMMANDS[args.command])
        threads = args.threads
        if threads is None:
            threads = int(os.environ.get("TWL_THREADS", "1"))
        result = run_experiment(cfg, threads)
    except ConfigError as err:
        print(f"twlab: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    fmt = args.format
    if fmt is None:
        fmt = "json" if (args.out or cfg.output or "").endswith(".json") else "csv"
    text = result.to_json() if fmt == "json" else result.to_csv()
    _emit(text, args.out or cfg.output)
    if not result.passed:
        print("twlab: validation assertions failed", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
