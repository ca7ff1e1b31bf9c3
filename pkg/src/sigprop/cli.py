"""``sigprop`` command line.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 acceptance check failed.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .errors import ConfigError, NumericalError, SigpropError
from .harness import FIGURES, OUT_ENV, default_out_dir, load_config, run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_CHECK = 4

log = logging.getLogger("sigprop")


def _common(parser):
    parser.add_argument("--config", metavar="PATH", help="flat key = value config file")
    parser.add_argument("--out", metavar="DIR", help=f"output directory (default: ${OUT_ENV} or ./sigprop_out)")
    parser.add_argument("--seed", type=int, help="root seed for weights, tokens and probes")
    parser.add_argument("--threads", type=int, default=1, metavar="K", help="worker count for seeds / sweep points")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                        help="override one config key (repeatable; wins over --config)")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="sigprop", description="Signal propagation in transformers at initialization.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "theory": "integrate covariance and APJN recurrences",
        "asymptotics": "phase map of c*, mu, zeta and 1/lambda over the sigma grid",
        "simulate": "measure APJN and activation statistics on the toy transformer",
        "compare": "theory vs measurement with per-region GMFE",
        "sweep": "run sweep_mode over the Cartesian product of list-valued keys",
    }
    for name, text in helps.items():
        _common(sub.add_parser(name, help=text, description=text))
    fig = sub.add_parser("figure", help="CSV data behind one figure recipe")
    fig.add_argument("which", choices=FIGURES)
    _common(fig)
    check = sub.add_parser("check", help="run the acceptance criteria")
    check.add_argument("criteria", nargs="*", type=int, help="criterion numbers (default: all)")
    check.add_argument("-v", "--verbose", action="store_true")
    return parser


def _check(args):
    from .acceptance import CRITERIA, run_criteria

    unknown = [k for k in args.criteria if k not in CRITERIA]
    if unknown:
        print(f"sigprop: unknown criteria {unknown}", file=sys.stderr)
        return EXIT_CONFIG
    results = run_criteria(args.criteria or None, echo=lambda line: print(line, flush=True))
    failed = [r.number for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed" + (f"; failed: {failed}" if failed else ""))
    return EXIT_CHECK if failed else EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "check":
        return _check(args)
    try:
        if args.threads < 1:
            raise ConfigError("threads", "must be >= 1")
        forced = {"mode": "figure" if args.command == "figure" else args.command,
                  "seed": args.seed}
        if args.command == "figure":
            forced["figure"] = args.which
        cfg = load_config(args.config, args.overrides, **forced)
        out = args.out or default_out_dir()
        manifest = run(cfg, out, workers=args.threads, command=" ".join(sys.argv[1:]) if argv is None else " ".join(argv))
    except ConfigError as exc:
        print(f"sigprop: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"sigprop: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except SigpropError as exc:
        print(f"sigprop: error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL if isinstance(exc, ArithmeticError) else EXIT_CONFIG
    for name in manifest["files"]:
        print(f"{out}/{name}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
