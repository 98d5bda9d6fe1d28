"""Command-line entry point.

Subcommands: ``generate`` (datasets to disk), ``train`` (fit a pipeline on a
saved dataset), ``evaluate`` (score a run), ``reproduce`` (full table
grids), and ``theory`` (bound calculators and brute-force verifiers, JSON to
stdout). Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 IO
error. Setting INVAE_DETERMINISTIC=1 forces single-process execution.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import theory
from .experiments import (
    ConfigError,
    ExperimentConfig,
    TABLE_IDS,
    evaluate_run,
    generate_and_save,
    reproduce_table,
    train_run,
)
from .numcore import NumericError
from .trainer import TrainingDivergedError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="invae",
        description="Multi-domain invariance-constrained autoencoder pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write dataset directories per seed")
    p_gen.add_argument("--config", required=True, help="experiment config JSON")
    p_gen.add_argument("--out", default=None, help="output directory (default: config.out)")

    p_train = sub.add_parser("train", help="train a pipeline on a saved dataset")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--data", required=True, help="dataset directory")
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--seed", type=int, default=0)

    p_eval = sub.add_parser("evaluate", help="score a trained run directory")
    p_eval.add_argument("--run", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--results", default=None, help="CSV to append a summary row to")

    p_rep = sub.add_parser("reproduce", help="run a result-table grid")
    p_rep.add_argument("--table", required=True, choices=TABLE_IDS)
    p_rep.add_argument("--scale", default="desk", choices=("desk", "full"))
    p_rep.add_argument("--out", default="tables")
    p_rep.add_argument("--jobs", type=int, default=1)

    p_theory = sub.add_parser("theory", help="bound calculators and verifiers")
    tsub = p_theory.add_subparsers(dest="subcommand", required=True)

    t = tsub.add_parser("t-bound", help="per-node multi-intervention count bound")
    t.add_argument("--d", type=int, required=True)
    t.add_argument("--delta", type=float, required=True)

    t = tsub.add_parser("lemma-mc", help="good-pairing coverage Monte Carlo")
    t.add_argument("--u", type=int, required=True, help="|U|")
    t.add_argument("--t", type=int, required=True)
    t.add_argument("--trials", type=int, default=100000)
    t.add_argument("--seed", type=int, default=0)

    t = tsub.add_parser("covering", help="parameter-ball covering number")
    t.add_argument("--s", type=int, required=True)
    t.add_argument("--theta-max", type=float, required=True)
    t.add_argument("--rho", type=float, required=True)

    t = tsub.add_parser("gamma-bound", help="domain-count bound for class exclusion")
    t.add_argument("--s", type=int, default=1)
    t.add_argument("--theta-max", type=float, default=1.0)
    t.add_argument("--L", type=float, default=1.0)
    t.add_argument("--eta", type=float, default=0.1)
    t.add_argument("--epsilon", type=float, default=0.5 - 1e-9)
    t.add_argument("--iota", type=float, default=0.5)
    t.add_argument("--c1", type=float, default=1.0)
    t.add_argument("--c2", type=float, default=1.0)
    t.add_argument("--l", type=int, default=2)
    t.add_argument("--r", type=int, default=2)
    t.add_argument("--delta", type=float, default=0.1)
    t.add_argument("--dim", type=int, default=1, help="latent dimension generalization")

    t = tsub.add_parser("gamma-example", help="worked quadratic minimum")
    t.add_argument("--theta", type=float, required=True)
    t.add_argument("--a", type=float, required=True)
    t.add_argument("--b", type=float, required=True)

    t = tsub.add_parser("orthant-domains", help="domains needed across all orthants")
    t.add_argument("--d", type=int, required=True)

    t = tsub.add_parser("orthant-check", help="positive-orthant oracle on random boxes")
    t.add_argument("--d", type=int, default=2)
    t.add_argument("--k", type=int, default=4)
    t.add_argument("--grid-res", type=int, default=50)
    t.add_argument("--tol", type=float, default=1e-6)
    t.add_argument("--seed", type=int, default=0)

    t = tsub.add_parser("polytope-rank", help="difference-matrix rank check")
    t.add_argument("--d", type=int, default=2)
    t.add_argument("--m", type=int, default=6, help="vertices per polytope")
    t.add_argument("--k", type=int, default=4)
    t.add_argument("--budget", type=int, default=20000)
    t.add_argument("--seed", type=int, default=0)
    return parser


def _theory_report(args) -> dict:
    from .latentgen import sample_polytope_supports, sample_support_boxes

    if args.subcommand == "t-bound":
        value = theory.multinode_t_bound(args.d, args.delta)
        return {"inputs": {"d": args.d, "delta": args.delta}, "bound": value}
    if args.subcommand == "lemma-mc":
        prob = theory.good_intervention_coverage_mc(args.u, args.t, args.trials, args.seed)
        return {
            "inputs": {"u": args.u, "t": args.t, "trials": args.trials, "seed": args.seed},
            "coverage": prob,
        }
    if args.subcommand == "covering":
        value = theory.covering_number(args.s, args.theta_max, args.rho)
        return {
            "inputs": {"s": args.s, "theta_max": args.theta_max, "rho": args.rho},
            "covering_number": value,
        }
    if args.subcommand == "gamma-bound":
        params = theory.GammaParams(
            s=args.s, theta_max=args.theta_max, L=args.L, eta=args.eta,
            epsilon=args.epsilon, iota=args.iota, c1=args.c1, c2=args.c2,
            l=args.l, r=args.r, delta=args.delta,
        )
        value = theory.gamma_domain_bound(params, d=args.dim)
        inputs = {k: getattr(args, k) for k in (
            "s", "theta_max", "L", "eta", "epsilon", "iota", "c1", "c2", "l", "r",
            "delta", "dim",
        )}
        return {"inputs": inputs, "bound": value}
    if args.subcommand == "gamma-example":
        value = theory.gamma_example_min(args.theta, (args.a, args.b))
        return {"inputs": {"theta": args.theta, "a": args.a, "b": args.b}, "min": value}
    if args.subcommand == "orthant-domains":
        return {"inputs": {"d": args.d}, "domains": theory.orthant_domain_count(args.d)}
    if args.subcommand == "orthant-check":
        S = tuple(range(args.d // 2)) if args.d > 1 else ()
        U = tuple(range(len(S), args.d))
        boxes = sample_support_boxes(args.d, S, args.k, 0.0, 1.0, args.seed)
        try:
            report = theory.positive_orthant_oracle(
                boxes, S, U, grid_res=args.grid_res, tol=args.tol
            )
        except theory.AssumptionNotMetError as err:
            return {
                "inputs": {"d": args.d, "k": args.k, "seed": args.seed},
                "status": "hypothesis-unmet",
                "detail": str(err),
            }
        return {
            "inputs": {
                "d": args.d, "k": args.k, "grid_res": args.grid_res,
                "tol": args.tol, "seed": args.seed,
            },
            "status": "pass" if report.passed else "fail",
            "n_feasible": report.n_feasible,
            "counterexamples": report.counterexamples,
        }
    if args.subcommand == "polytope-rank":
        polys = sample_polytope_supports(
            args.d, tuple(range(args.d // 2)), args.k, args.m, args.seed
        )
        U = tuple(range(args.d // 2, args.d))
        ok, offender = theory.polytope_diff_rank_check(polys, U, budget=args.budget)
        return {
            "inputs": {
                "d": args.d, "m": args.m, "k": args.k,
                "budget": args.budget, "seed": args.seed,
            },
            "passed": bool(ok),
            "offending_matrix": None if offender is None else offender.tolist(),
        }
    raise ConfigError(f"unknown theory subcommand {args.subcommand!r}")


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "generate":
            cfg = ExperimentConfig.from_json(args.config)
            out = Path(args.out) if args.out else Path(cfg.out)
            for path in generate_and_save(cfg, out):
                print(path)
        elif args.command == "train":
            cfg = ExperimentConfig.from_json(args.config)
            out = Path(args.out) if args.out else Path(cfg.out) / f"run_seed{args.seed}"
            print(train_run(cfg, Path(args.data), out, args.seed))
        elif args.command == "evaluate":
            report = evaluate_run(
                Path(args.run),
                Path(args.data),
                Path(args.results) if args.results else None,
            )
            print(json.dumps({"r2_s": report.r2_s, "r2_u": report.r2_u}))
        elif args.command == "reproduce":
            print(reproduce_table(args.table, args.scale, Path(args.out), args.jobs))
        elif args.command == "theory":
            print(json.dumps(_theory_report(args), indent=2))
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, NumericError, np.linalg.LinAlgError) as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FileNotFoundError) as err:
        print(f"io error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
