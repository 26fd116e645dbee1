"""Command-line entry point: ``crdro {solve,oracle,bias,bench,gradcheck}``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure,
4 gradient-check violation.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, load_config
from .data import DataError
from .dual import DualDomainError
from .divergence import DivergenceError
from .experiments import cmd_bench, cmd_bias, cmd_gradcheck, cmd_oracle, cmd_solve
from .solvers import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_GRADCHECK = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crdro", description="Constrained DRO via the dual reformulation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("solve", "run one solver and write trace.jsonl, curve.csv, summary.json"),
        ("oracle", "brute-force primal and dual values for the [oracle] loss vector"),
        ("bias", "Monte-Carlo plug-in bias study; writes bias.csv"),
        ("bench", "paired solver comparison; writes curves.csv, groups.csv, summary.csv"),
        ("gradcheck", "finite-difference audit of loss and dual-objective gradients"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default="out", help="output directory (default: out)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "solve":
            summary = cmd_solve(cfg, args.out, args.seed)
            keys = ("solver", "t_prime", "objective", "grad_x_norm", "dual_gap", "executed")
            print(json.dumps({k: summary[k] for k in keys if k in summary}))
        elif args.command == "oracle":
            print(json.dumps(cmd_oracle(cfg, args.out), indent=2))
        elif args.command == "bias":
            report = cmd_bias(cfg, args.out, args.seed)
            for row in report.rows():
                print(f"n_z={row['n_z']:6d}  gap={row['measured_gap']:.3e}  bound={row['bias_bound']:.3e}")
            print(f"fitted slope {report.fitted_slope:.3f}")
        elif args.command == "bench":
            for row in cmd_bench(cfg, args.out, args.seed):
                print(f"{row['solver']:8s} seed={row['seed']}  objective={row['train_objective']:.5f}"
                      f"  worst-group test loss={row['test_worst_group_loss']}")
        elif args.command == "gradcheck":
            report = cmd_gradcheck(cfg, args.out, args.seed)
            print(f"loss max rel error {report.loss_max_rel_error:.2e} (worst sample {report.loss_worst_sample},"
                  f" coord {report.loss_worst_coord})")
            print(f"dual grad_x max rel error {report.dual_x_max_rel_error:.2e}")
            print(f"dual grad_z max rel error {report.dual_z_max_rel_error:.2e}")
            if not report.passed:
                print(f"FAILED: tolerance {report.tol:g} exceeded", file=sys.stderr)
                print(f"worst loss point x={report.loss_worst_x}", file=sys.stderr)
                print(f"worst dual point {json.dumps(report.dual_worst_point)}", file=sys.stderr)
                return EXIT_GRADCHECK
            print("passed")
    # every library validation error derives from ValueError
    except (ConfigError, DataError, DivergenceError, DualDomainError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
