"""Command line entry point: ``fastadv {run,sweep,report,plot}``."""

import argparse
import json
import logging
import os
import sys

from ..errors import ConfigurationError, FormatError, InputError
from .config import PRESETS, load_config_file, resolve
from .plots import PLOT_KINDS, plot
from .report import report
from .runner import exit_status, run_experiment, run_sweep

EXIT_USAGE = 2


def parse_seeds(text: str):
    """``0,1,2`` or a range ``0-24``."""
    try:
        if "-" in text and "," not in text:
            lo, hi = text.split("-")
            return list(range(int(lo), int(hi) + 1))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}; use 0,1,2 or 0-4")


def _add_experiment_flags(p):
    p.add_argument("--config", help="JSON or YAML experiment file; may name a preset and override it")
    p.add_argument("--preset", choices=sorted(PRESETS), metavar="NAME", help="named configuration")
    p.add_argument("--out", help="output directory")
    p.add_argument("--dataset", choices=["cifar10", "synthetic"],
                   help="swap the data source; synthetic uses a small generated stand-in with a scaled-down lr")
    p.add_argument("--data-path", help="directory holding the CIFAR-10 binary batches")
    p.add_argument("--epochs", type=int, help="override the number of training epochs")


def build_parser():
    parser = argparse.ArgumentParser(prog="fastadv", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="train and evaluate one configuration")
    _add_experiment_flags(p)
    p.add_argument("--seed", type=int, help="seed for model init, data order, attacks and subsets")

    p = sub.add_parser("sweep", help="repeat a configuration over seeds and tabulate collapse epochs")
    _add_experiment_flags(p)
    p.add_argument("--seeds", type=parse_seeds, required=True, help="e.g. 0,1,2 or 0-24")
    p.add_argument("--floor", type=float, default=0.05, help="robust accuracy counted as collapse")
    p.add_argument("--no-terminate", action="store_true", help="keep training after a collapse")

    p = sub.add_parser("report", help="compare finished runs")
    p.add_argument("run_dirs", nargs="+", help="run directories or directories of runs")
    p.add_argument("--json", action="store_true", help="print machine-readable rows instead of the table")

    p = sub.add_parser("plot", help="render figures from run directories")
    p.add_argument("run_dirs", nargs="+", help="run directory (trace), sweep directory or several runs")
    p.add_argument("--kind", choices=PLOT_KINDS, required=True)
    p.add_argument("--out", help="where to write images (default: the first directory)")
    return parser


def config_from_args(args, seed=None):
    overrides = load_config_file(args.config) if args.config else {}
    if args.dataset == "cifar10":
        overrides.setdefault("dataset", {})["kind"] = "cifar10"
    if args.data_path:
        overrides.setdefault("dataset", {})["path"] = args.data_path
    if args.epochs is not None:
        overrides.setdefault("train", {})["epochs"] = args.epochs
    if args.preset is None and not overrides:
        raise ConfigurationError("give --preset or --config")
    return resolve(args.preset, overrides, seed=seed, output_dir=args.out, synthetic=args.dataset == "synthetic")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.verb == "run":
            config = config_from_args(args, seed=args.seed)
            if args.out is None:
                config.output_dir = os.path.join("runs", f"{config.name}_seed{config.train.seed}")
            summary = run_experiment(config)
            print(json.dumps(summary, indent=2, sort_keys=True))
            return exit_status(summary)
        if args.verb == "sweep":
            config = config_from_args(args)
            out = args.out or os.path.join("runs", f"{config.name}_sweep")
            rows = run_sweep(config, args.seeds, out, terminate=not args.no_terminate, floor=args.floor)
            for row in rows:
                print(json.dumps(row.to_dict(), sort_keys=True))
            return 0
        if args.verb == "report":
            result = report(args.run_dirs)
            print(json.dumps(result["rows"], indent=2) if args.json else result["text"])
            return 0
        result = plot(args.run_dirs, args.kind, args.out)
        for path in result.paths:
            print(path)
        return 0
    except (ConfigurationError, InputError, FormatError, FileNotFoundError) as exc:
        print(f"fastadv {args.verb}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
