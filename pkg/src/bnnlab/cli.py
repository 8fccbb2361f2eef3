"""Command-line driver for the experiment harness.

Verbs mirror the experiment stages: train the roster, sweep attacks over
eps or iteration grids, run EOT campaigns, produce calibration reports,
and aggregate everything into one summary table.  Exit status is nonzero
iff any sub-run failed; partial results are flushed with a manifest
marking completeness.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .harness import (
    aggregate_report,
    default_config,
    load_config,
    load_models,
    run_calibration_report,
    run_eot_campaign,
    run_epsilon_sweep,
    run_iteration_sweep,
    run_training_suite,
)

_VERBS = {
    "train": "train every roster model and checkpoint it",
    "sweep-eps": "evaluate the roster across the eps grids",
    "sweep-iters": "evaluate PGD at fixed eps across iteration counts",
    "eot": "run the EOT attack campaign over the linf grid",
    "calibrate": "emit reliability diagrams, ECE, and MCE per model",
    "report": "aggregate emitted CSVs into one summary table",
}


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bnnlab",
                                description="Bayesian-vs-deterministic robustness lab")
    sub = p.add_subparsers(dest="command", required=True)
    for verb, help_text in _VERBS.items():
        sp = sub.add_parser(verb, help=help_text)
        sp.add_argument("--out", required=True, help="output directory")
        if verb != "report":
            sp.add_argument("--config", help="experiment config JSON (default: built-in)")
            sp.add_argument("--seed", type=int, help="override the master seed")
            sp.add_argument("--workers", type=int, help="override the worker count")
    return p


def _config_for(args):
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "report":
            path = aggregate_report(args.out)
            print(f"wrote {path}")
            return 0
        cfg = _config_for(args)
        if args.command == "train":
            ckpts, table = run_training_suite(cfg, args.out)
            for row in table.rows:
                print(f"{row.model}: clean accuracy {row.accuracy:.3f} "
                      f"({row.wall_time_s:.1f}s)")
            print(f"saved {len(ckpts)} checkpoints under {args.out}")
            return 0
        models = load_models(cfg, args.out)
        runner = {
            "sweep-eps": run_epsilon_sweep,
            "sweep-iters": run_iteration_sweep,
            "eot": run_eot_campaign,
        }.get(args.command)
        if runner is not None:
            table = runner(cfg, models, args.out)
            print(f"wrote {len(table.rows)} rows under {args.out}")
            return 0
        reports = run_calibration_report(cfg, models, args.out)
        for name, rep in reports.items():
            print(f"{name}: ece {rep.ece:.4f} mce {rep.mce:.4f}")
        return 0
    except Exception as e:  # surfaced as exit status per the CLI contract
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
