"""Command line: ``aarmr run|compare|sweep <preset|config-file> [--key value ...]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .bench import (SPEC_FIELDS, compare, format_compare, format_spec, format_summary, load_spec, run,
                    sweep)
from .errors import ConfigurationError, ParameterError, SolverError, OptimizationError
from .presets import PRESETS

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("aarmr")


def _add_spec_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("problem overrides (win over config-file values)")
    for name in SPEC_FIELDS:
        if name == "preset":
            continue
        g.add_argument(f"--{name.replace('_', '-')}", dest=f"spec_{name}", metavar="VALUE",
                       help="e.g. 320x160" if name == "dims" else None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aarmr",
        description="Topology optimization with MGCG and reduced-model reanalysis solvers.",
        epilog=f"presets: {', '.join(PRESETS)}")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v logs every iteration, -vv adds solver details")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="optimize one problem and write log, density and summary")
    p.add_argument("target", help="preset name or key = value config file")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    _add_spec_flags(p)

    p = sub.add_parser("compare", help="run several solver modes; the first is the reference")
    p.add_argument("target")
    p.add_argument("--modes", default="mgcg,aarmr", help="comma-separated (default: mgcg,aarmr)")
    p.add_argument("--out", default="runs")
    _add_spec_flags(p)

    p = sub.add_parser("sweep", help="run the Cartesian product of parameter values")
    p.add_argument("target")
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2,...",
                   help="parameter and its values; repeat for more axes")
    p.add_argument("--out", default="runs")
    _add_spec_flags(p)

    sub.add_parser("presets", help="list presets with their default settings")
    return parser


def _overrides(args) -> dict:
    return {k[5:]: v for k, v in vars(args).items() if k.startswith("spec_") and v is not None}


def _parse_grid(items) -> dict:
    grid = {}
    for item in items:
        if "=" not in item:
            raise ConfigurationError(f"--grid expects KEY=V1,V2,... (got {item!r})")
        key, values = item.split("=", 1)
        grid[key.strip().replace("-", "_")] = [v.strip() for v in values.split(",") if v.strip()]
    return grid


def _progress(rec):
    log.info("loop %4d  obj %.8g  vol %.4f  change %.4f%%  %s  eps %.3g  cg %d  %.3fs",
             rec.loop, rec.objective, rec.volume, rec.change_pct, rec.path, rec.epsilon,
             rec.cg_iters, rec.solve_seconds)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "presets":
            from .bench import make_spec
            for name in PRESETS:
                print(f"[{name}]")
                print(format_spec(make_spec(name)))
            return EXIT_OK
        spec = load_spec(args.target, _overrides(args))
        out = Path(args.out)
        if args.command == "run":
            report = run(spec, out, callback=_progress)
            print(format_summary(report.summary()), end="")
            return EXIT_OK
        if args.command == "compare":
            rows = compare(spec, [m.strip() for m in args.modes.split(",") if m.strip()], out, callback=_progress)
            print(format_compare(rows), end="")
            return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_SOLVER
        rows = sweep(spec, _parse_grid(args.grid), out, callback=_progress)
        failed = [r for r in rows if r["status"] != "ok"]
        print(f"{len(rows)} cells, {len(failed)} failed; results in {out}")
        return EXIT_OK if not failed else EXIT_SOLVER
    except (ConfigurationError, ParameterError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, OptimizationError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
