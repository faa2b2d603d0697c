"""Command-line entry point.

Exit codes: 0 success, 1 experiment failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import runner
from .stream import make_synthetic_benchmark, parse_descriptor, save_dataset

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ocssl",
        description="Online continual self-supervised learning experiments under a fixed backward-pass budget.",
        epilog=f"Relative output directories are resolved against ${runner.OUTPUT_ROOT_ENV} when it is set.",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run every strategy x seed cell of a manifest")
    r.add_argument("config")
    q = sub.add_parser("parity", help="print the CBP of every strategy and check parity")
    q.add_argument("config")
    c = sub.add_parser("continue-iid", help="continue a checkpoint on i.i.d. minibatches")
    c.add_argument("checkpoint")
    c.add_argument("config")
    g = sub.add_parser("gen-dataset", help="write a synthetic benchmark (PATH and PATH.test)")
    g.add_argument("descriptor")
    g.add_argument("path")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gen-dataset":
            d = parse_descriptor(args.descriptor)
            train, test = make_synthetic_benchmark(d.classes, d.per_class, d.d, d.sep, d.seed, d.test_per_class)
            save_dataset(train, args.path)
            save_dataset(test, str(args.path) + ".test")
            print(f"wrote {len(train)} training and {len(test)} test samples to {args.path}[.test]")
            return EXIT_OK
        if args.command == "parity":
            try:
                m = runner.parse_config(args.config)
            except runner.UsageError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_USAGE
            print(runner.parity_table(m))
            return EXIT_OK
        if args.command == "run":
            m = runner.parse_config(args.config)
            code, out = runner.run(m)
            print(f"artifacts in {out}" + ("" if code == EXIT_OK else " (some cells failed, see failures.json)"))
            return code
        if args.command == "continue-iid":
            m = runner.parse_config(args.config)
            if not Path(args.checkpoint).is_file():
                raise runner.UsageError(f"no checkpoint at {args.checkpoint}")
            curve, out = runner.continue_iid(args.checkpoint, m)
            for point in curve:
                print(f"{point['phase']:<7} cbp={point['cbp_total']:<10} acc={point['probe_acc']:.4f}")
            return EXIT_OK
    except ValueError as exc:  # UsageError and IntegrityError included
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
