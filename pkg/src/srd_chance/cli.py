"""``srd-chance`` command-line interface."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import experiments
from .config import ExperimentConfig
from .errors import ConfigError, DefinitenessError, InfeasibleStartError, SlaterError

COMMANDS = {
    "estimate": experiments.cmd_estimate,
    "converge": experiments.cmd_converge,
    "kl-study": experiments.cmd_kl_study,
    "variance-study": experiments.cmd_variance_study,
    "optimize": experiments.cmd_optimize,
}

EXIT_CONFIG, EXIT_SLATER, EXIT_DEFINITENESS, EXIT_INFEASIBLE = 2, 3, 4, 5

log = logging.getLogger("srd_chance")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="srd-chance",
                                 description="Spherical-radial chance-constraint experiments (CSV output).")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="INI file with an [experiment] section (defaults if omitted)")
    ap.add_argument("--fast", action="store_true", help="desk-scale profile: n=64, N<=1e4, R<=20")
    ap.add_argument("--seed", type=int, help="override the base seed")
    ap.add_argument("--out", default="results", help="output directory (created if missing)")
    ap.add_argument("--threads", type=int, help="worker threads for sample evaluation")
    ap.add_argument("--dump-operators", action="store_true",
                    help="also write the assembled operators as (row, col, value) text")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig().validate()
    if args.fast:
        cfg = cfg.fast()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.threads is not None:
        cfg = cfg.replace(threads=args.threads)
    return cfg


def dump_operators(cfg: ExperimentConfig, out_dir) -> None:
    problem = experiments.build_problem(cfg)
    if cfg.problem == "linear":
        problem.A.dump_coo(os.path.join(out_dir, "operator_laplacian_mixed.txt"))
    else:
        problem.fem.stiffness.dump_coo(os.path.join(out_dir, "operator_stiffness.txt"))
        problem.fem.mass.dump_coo(os.path.join(out_dir, "operator_mass.txt"))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "config.ini"), "w") as fh:
            fh.write(cfg.to_text())
        if args.dump_operators:
            dump_operators(cfg, args.out)
        COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SlaterError as exc:
        print(f"slater error: {exc}", file=sys.stderr)
        return EXIT_SLATER
    except DefinitenessError as exc:
        print(f"definiteness error: {exc}", file=sys.stderr)
        return EXIT_DEFINITENESS
    except InfeasibleStartError as exc:
        print(f"infeasible start: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    log.info("wrote results to %s", args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
