"""Command-line entry point: ``diffplan <stage> [flags]``.

Exit codes: 0 success, 2 budget infeasible, 1 any other error (including a
missing predecessor artifact, whose filename is printed).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import BudgetInfeasible
from .pipeline import RUNS_ENV, STAGES, Run, RunConfig, default_run_dir, run_all, run_stage

log = logging.getLogger("diffplan")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common.add_argument("--seed", type=int, default=0, help="seed for data, calibration and search")
    common.add_argument("--config", type=Path, default=None, help="JSON run config; flags override its fields")
    common.add_argument("--run-dir", type=Path, default=None,
                        help=f"output directory; None means ${RUNS_ENV}/seed<SEED>, or runs/seed<SEED> when unset")
    common.add_argument("--workers", type=int, default=1, help="evaluation worker threads")
    common.add_argument("--k", type=int, default=None, help="kept steps for the count-k schedule; None means T/2")
    common.add_argument("--rho", type=float, default=0.2, help="protected tail fraction")
    common.add_argument("--b-lat", type=float, default=None,
                        help="latency budget in cost units; None means the refined plan on the count-k schedule")
    common.add_argument("--b-mem", type=float, default=None, help="memory budget in bytes; None means the refined plan's size")
    common.add_argument("--uniform-seed", action="store_true",
                        help="skip tiering and seed every layer at W4/g288")
    common.add_argument("--wall-clock", action="store_true", help="also time the sampling loop (informational)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="diffplan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="stage", required=True)
    for name in (*STAGES, "all"):
        sub.add_parser(name, parents=[common], formatter_class=argparse.ArgumentDefaultsHelpFormatter,
                       help="run every stage" if name == "all" else f"run the {name} stage")
    return p


def build_config(args, argv) -> RunConfig:
    doc = {}
    if args.config is not None:
        with open(args.config) as fh:
            doc = json.load(fh)
    cfg = RunConfig.from_dict(doc)
    # explicit flags override the file; defaults only fill fields the file left out
    given = {a.split("=")[0] for a in argv if a.startswith("--")}
    for flag, attr in (("--seed", "seed"), ("--k", "k"), ("--rho", "rho"),
                       ("--b-lat", "b_lat"), ("--b-mem", "b_mem"), ("--wall-clock", "wall_clock")):
        if flag in given or attr not in doc:
            setattr(cfg, attr, getattr(args, attr))
    if args.uniform_seed:
        cfg.calibration["uniform_seed"] = True
    return cfg


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = build_config(args, argv)
    run = Run(args.run_dir or default_run_dir(cfg.seed), cfg, workers=args.workers)
    try:
        if args.stage == "all":
            run_all(run)
        else:
            run_stage(args.stage, run)
    except BudgetInfeasible as exc:
        print(f"budget infeasible ({exc.resource}): {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every other failure maps to exit 1
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
