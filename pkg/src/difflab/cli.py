"""``difflab <subcommand> --config <path> [--seed N] [--out DIR]``

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .harness.config import STAGE_NAMES, ConfigError, load_config
from .harness.pipeline import DEFAULT_OUT, StageError, run_pipeline, run_stage, sensitivity_sweep

EXIT_OK, EXIT_CONFIG, EXIT_MISSING = 0, 2, 3
SUBCOMMANDS = STAGE_NAMES + ("sweep", "run")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="difflab", description="Diffusion backdoor lab: train, attack, evaluate, report.")
    p.add_argument("subcommand", choices=SUBCOMMANDS,
                   help="a pipeline stage, 'sweep' (sweep.parameter over sweep.values) or 'run' "
                        "(every stage in run.stages, building prerequisites)")
    p.add_argument("--config", required=True, type=Path, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=None, help="override the config's seed")
    p.add_argument("--out", type=Path, default=DEFAULT_OUT, help=f"output directory (default {DEFAULT_OUT})")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace({"seed": args.seed})
        if args.subcommand == "sweep":
            param = cfg["sweep.parameter"]
            sensitivity_sweep(cfg, param, cfg["sweep.values"], args.out)
            path = args.out / "sweep" / f"{param}.csv"
        elif args.subcommand == "run":
            run_pipeline(cfg, args.out)
            path = args.out / "report.json"
        else:
            _, path = run_stage(args.subcommand, cfg, args.out)
    except ConfigError as exc:
        print(f"difflab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"difflab: {exc}", file=sys.stderr)
        return EXIT_MISSING
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
