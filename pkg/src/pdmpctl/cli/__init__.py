"""Command-line front end: ``pdmpctl simulate|solve|evaluate|verify``."""

import argparse
import sys
from pathlib import Path

from .commands import (Context, VerificationFailure, cmd_evaluate, cmd_simulate, cmd_solve,
                       versions, write_json)
from .config import ConfigError, ExperimentConfig, config_hash, load_config
from .verify import run_suites

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4


def _parser():
    parser = argparse.ArgumentParser(prog="pdmpctl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs in (("simulate", True), ("solve", True), ("evaluate", True),
                        ("verify", False)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=needs, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--workers", type=int, default=1, help="worker processes")
        p.add_argument("--out", default=None, help="output directory (overrides run.out)")
    return parser


def _context(args):
    if args.config:
        cfg = load_config(args.config)
        base = Path(args.config).parent
    else:
        cfg = ExperimentConfig.model_validate({"model": {"model": "elementary"}})
        base = Path(".")
    if args.seed is not None and args.seed < 0:
        raise ConfigError("--seed must be nonnegative")
    if args.workers < 1:
        raise ConfigError("--workers must be at least 1")
    return Context(cfg, base, args.seed, args.out, args.workers)


def cmd_verify(ctx):
    results = run_suites(ctx.seed)
    report = ctx.metadata("verify")
    report.update(suites=results, all_pass=all(r["pass"] for r in results))
    write_json(ctx.out / "verify.json", report)
    return report


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        ctx = _context(args)
        if args.command == "simulate":
            meta = cmd_simulate(ctx)
            print(f"wrote {ctx.out} (v in [{meta['v_min']:.4g}, {meta['v_max']:.4g}])")
        elif args.command == "solve":
            rep = cmd_solve(ctx)
            print(f"converged in {rep['iterations']} iterations, C = {rep['C']:.4g}")
        elif args.command == "evaluate":
            out = cmd_evaluate(ctx)
            print(f"V = {out['V']:.6g} +- {out['se_V']:.2g}, J = {out['J']:.6g} +- "
                  f"{out['se_J']:.2g}: {'pass' if out['pass'] else 'FAIL'}")
            if not out["pass"]:
                raise VerificationFailure("estimators disagree beyond 3 standard errors")
        else:
            rep = cmd_verify(ctx)
            for r in rep["suites"]:
                print(f"{'PASS' if r['pass'] else 'FAIL'} {r['name']}")
            if not rep["all_pass"]:
                raise VerificationFailure("property suite failures")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationFailure as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except ArithmeticError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


__all__ = ["main", "ConfigError", "ExperimentConfig", "config_hash", "versions"]
