"""Command-line entry point: ``coopcensor <subcommand> --scenario ... --out DIR``.

Exit codes: 0 success, 2 usage error, 3 bad scenario or slice, 4 lattice
budget exceeded, 5 no convergence, 6 degenerate scenario, 1 anything else.
"""

import argparse
import logging
import sys

from . import __version__
from .errors import CensoringError
from .experiments import SWEEP_AXES, ExperimentSpec, run

log = logging.getLogger("coopcensor")


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _num_list(text):
    out = []
    for v in filter(None, (s.strip() for s in text.split(","))):
        try:
            out.append(int(v))
        except ValueError:
            try:
                out.append(float(v))
            except ValueError:
                raise argparse.ArgumentTypeError(f"not a number: {v!r}") from None
    return tuple(out)


def _names(text):
    return tuple(s.strip().upper() for s in text.split(",") if s.strip())


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", required=True,
                        help="scenario JSON file, or builder:params such as line:n=10,E_T=5, tree:n=50,seed=3, pair")
    common.add_argument("--out", default="out", help="output directory (default: %(default)s)")
    common.add_argument("--seed", type=int, default=0, help="base seed (default: %(default)s)")
    common.add_argument("--no-plot", dest="plots", action="store_false", help="skip PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    sims = argparse.ArgumentParser(add_help=False)
    sims.add_argument("--strategies", type=_names, default=("NS", "ST", "GCT"),
                      help="comma-separated subset of NS, ST, GCT (default: all)")
    sims.add_argument("--runs", type=int, default=1, help="replications per strategy and sweep point")
    sims.add_argument("--refresh", type=int, default=500, help="GCT periodic refresh interval in epochs")
    sims.add_argument("--max-epochs", type=int, default=None)
    sims.add_argument("--workers", type=int, default=1, help="worker processes for replications")

    parser = argparse.ArgumentParser(prog="coopcensor", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="task", required=True)

    p = sub.add_parser("solve-exact", parents=[common], help="value and threshold tables on the energy lattice")
    p.add_argument("--emax", type=_int_list, default=(), help="lattice cap, one value or one per node")
    p.add_argument("--budget", type=int, default=None, help="maximum number of lattice cells")

    sub.add_parser("solve-asymptotic", parents=[common], help="constant thresholds from the critical-node recursion")
    sub.add_parser("simulate", parents=[common, sims], help="replicated simulation of each strategy")

    p = sub.add_parser("experiment", parents=[common, sims], help="simulations over a parameter sweep")
    p.add_argument("--sweep", choices=SWEEP_AXES, default=None)
    p.add_argument("--values", type=_num_list, default=(),
                   help="sweep values; for topology, a single number of random trees (default 100)")

    p = sub.add_parser("lifetime-sweep", parents=[common], help="thresholds and lifetimes against energy direction")
    p.add_argument("--radius", type=float, default=1e4)
    p.add_argument("--steps", type=int, default=200)
    return parser


def spec_from_args(args):
    kw = {k: v for k, v in vars(args).items() if k not in ("verbose", "budget") and v is not None}
    if getattr(args, "budget", None) is not None:
        kw["budget"] = args.budget
    kw.pop("max_epochs", None)
    return ExperimentSpec(max_epochs=getattr(args, "max_epochs", None), **kw)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = spec_from_args(args)
        rec = run(spec)
    except CensoringError as exc:
        print(f"coopcensor: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        log.debug("unexpected failure", exc_info=True)
        print(f"coopcensor: error: {exc}", file=sys.stderr)
        return 1
    for name in rec.files:
        print(rec.out / name)
    print(rec.out / "manifest.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
