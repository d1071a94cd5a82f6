"""``adjoint-pde`` command line: run, observe, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import AdjointPdeError, ConfigError
from .config import load_config, parse_overrides
from .examples import generate_observations, obs_path, run_example, run_gradcheck

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adjoint-pde", description="PDE parameter recovery by reverse-mode differentiation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("example", help="ex1..ex6, ex9 or the long example name")
        sp.add_argument("--config", help="flat key = value file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable)")

    run = sub.add_parser("run", help="run an experiment and write its outputs")
    common(run)
    run.add_argument("--out", help="output directory (default runs/<example>)")
    common(sub.add_parser("observe", help="generate and save the observations"))
    gc = sub.add_parser("gradcheck", help="compare tape and finite-difference gradients")
    common(gc)
    gc.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.example, args.config, parse_overrides(args.set),
                          getattr(args, "out", None))
        if args.command == "observe":
            generate_observations(cfg)
            print(f"observations written to {obs_path(cfg)}")
            return EXIT_OK
        if args.command == "gradcheck":
            ok = True
            for name, err, tol in run_gradcheck(cfg, args.seed):
                passed = err <= tol
                ok &= passed
                print(f"{name}: max relative error {err:.3e} (tol {tol:.0e}) {'ok' if passed else 'FAIL'}")
            return EXIT_OK if ok else EXIT_SOLVER
        rec = run_example(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AdjointPdeError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    print(json.dumps({k: v for k, v in rec.summary().items() if k != "final_params" or len(v) <= 10},
                     indent=2))
    if rec.failed:
        print(f"solver error: {rec.error}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
