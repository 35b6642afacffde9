"""Command line driver.

Exit codes: 0 success, 2 input error, 3 configuration error, 4 statistical
abort (fewer than 2 subjects survive registration).
"""
from __future__ import annotations

import argparse
import logging
import sys

from ecgtrend import __version__
from ecgtrend.config import load_config
from ecgtrend.errors import ConfigError, InputError, StatisticalAbort
from ecgtrend.pipeline import run_analyze, run_ingest, run_report, run_simulate

EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_STATS = 0, 2, 3, 4


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value configuration file")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="ecgtrend", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic cohort")
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("ingest", parents=[common], help="ECG CSVs -> BeatSeries CSVs")
    p.add_argument("inputs", nargs="*", help="ECG CSV files or directories")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("analyze", parents=[common], help="BeatSeries CSVs -> bands, PCA, feature reports")
    p.add_argument("inputs", nargs="*", help="BeatSeries CSV files or directories")
    p.add_argument("--out", required=True, metavar="DIR")

    p = sub.add_parser("report", parents=[common], help="summarize feature reports of an analyze run")
    p.add_argument("--out", required=True, metavar="DIR", help="directory written by analyze")
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.set, args.seed)
        if args.command == "simulate":
            run_simulate(cfg, args.out)
        elif args.command == "ingest":
            _, failures = run_ingest(cfg, args.inputs, args.out, jobs=args.jobs)
            for path, message in failures.items():
                print(f"ingest failed: {path}: {message}", file=sys.stderr)
            if failures:
                return EXIT_INPUT
        elif args.command == "analyze":
            run_analyze(cfg, args.inputs, args.out)
        else:
            sys.stdout.write(run_report(args.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StatisticalAbort as exc:
        print(f"statistical abort: {exc}", file=sys.stderr)
        return EXIT_STATS
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
