"""Command-line entry point.

Subcommands mirror the pipeline stages; `run` chains them.  Exit codes:
0 success, 2 configuration error, 3 missing or corrupt artifact,
4 numerical failure.  Heavy imports happen after argument parsing so
--threads can cap the BLAS pools before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys

from .errors import (
    ArtifactError,
    ConfigError,
    ConvergenceError,
    DataIntegrityError,
    DegenerateDataError,
)

STAGES = ("simulate", "train", "reconstruct", "evaluate", "run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kmotion",
        description="Motion-aware k-space acquisition simulator and "
                    "reconstruction pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, help=f"{name} stage" if name != "run"
                           else "all stages in order")
        p.add_argument("--config", metavar="PATH", default=None,
                       help="YAML config overlaying the profile defaults")
        p.add_argument("--out", metavar="DIR", required=True,
                       help="run directory for artifacts and reports")
        p.add_argument("--seed", type=int, default=None,
                       help="root seed override")
        p.add_argument("--profile", choices=("desk", "paper"), default="desk",
                       help="base parameter profile (default desk)")
        p.add_argument("--threads", type=int, default=None, metavar="N",
                       help="cap numpy BLAS threads")
        if name in ("reconstruct", "run"):
            p.add_argument("--variant",
                           choices=("static", "nonrigid", "shift", "accelerated"),
                           default=None,
                           help="single variant instead of the configured list")
    return parser


def _set_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("kmotion: --threads must be >= 1", file=sys.stderr)
            return 2
        _set_threads(args.threads)

    from . import pipeline
    from .config import read_config

    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if getattr(args, "variant", None) is not None:
            # flows through read_config so cross-field validation still runs
            overrides["report"] = {"variants": [args.variant]}
        cfg = read_config(args.config, profile=args.profile,
                          overrides=overrides or None)

        paths = pipeline.RunPaths(args.out)
        if args.command == "simulate":
            pipeline.stage_simulate(cfg, paths)
        elif args.command == "train":
            pipeline.stage_train(cfg, paths)
        elif args.command == "reconstruct":
            for v in cfg.report.variants:
                pipeline.stage_reconstruct(cfg, paths, v)
        elif args.command == "evaluate":
            pipeline.stage_evaluate(cfg, paths, profile=args.profile)
        else:
            pipeline.run_all(cfg, paths, profile=args.profile)
    except ConfigError as e:
        print(f"kmotion: config error: {e}", file=sys.stderr)
        return 2
    except ArtifactError as e:
        print(f"kmotion: artifact error: {e}", file=sys.stderr)
        return 3
    except (ConvergenceError, DataIntegrityError, DegenerateDataError,
            FloatingPointError) as e:
        print(f"kmotion: numerical failure: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
