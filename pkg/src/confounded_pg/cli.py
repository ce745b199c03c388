"""Command-line entry point: ``confounded-pg {generate,gradient-bench,optimize,selfcheck}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError
from .experiments import (ExperimentConfig, apply_settings, read_config_file, run_generate,
                          run_gradient_bench, run_optimize, run_selfcheck)

EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="confounded-pg",
                     description="Offline policy gradient experiments under hidden confounding.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, defaults_note=""):
        p.add_argument("--config", help="flat key = value experiment file")
        p.add_argument("--env", choices=("tabular", "continuous"))
        p.add_argument("--n", help="sample size, or comma-separated sizes for gradient-bench")
        p.add_argument("--seed", type=int, help="base seed; replicate r uses seed + r")
        p.add_argument("--out", help="output path ('-' for stdout)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any configuration key (repeatable)")

    p = sub.add_parser("generate", help="write an offline dataset")
    common(p)
    for name, helptext in (("gradient-bench", "gradient error benchmark at the uniform policy"),
                           ("optimize", "policy optimization with per-iterate rollout values")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--method", help="comma-separated: proposed, naive, cloning, tabular_ident")
        p.add_argument("--k", type=int, help="number of gradient steps")
        p.add_argument("--replicates", type=int)
        p.add_argument("--cv", action="store_true", help="choose (lam, xi, mu) by cross-validation")
    p = sub.add_parser("selfcheck", help="fast numerical self-test")
    p.add_argument("--pinv-tol", type=float, default=None, help=argparse.SUPPRESS)
    return parser


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config:
        apply_settings(cfg, read_config_file(args.config))
    flags = {}
    for key, val in (("env", args.env), ("n", args.n), ("seed", args.seed), ("out", args.out),
                     ("methods", getattr(args, "method", None)), ("k", getattr(args, "k", None)),
                     ("replicates", getattr(args, "replicates", None))):
        if val is not None:
            flags[key] = str(val)
    if getattr(args, "cv", False):
        flags["cv"] = "true"
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        flags[key.strip()] = val
    apply_settings(cfg, flags)
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "selfcheck":
            return 0 if run_selfcheck(args.pinv_tol) else EXIT_RUNTIME
        cfg = config_from_args(args)
        if args.command == "generate":
            run_generate(cfg)
        elif args.command == "gradient-bench":
            run_gradient_bench(cfg)
        else:
            run_optimize(cfg)
    except ConfigError as exc:
        print(f"confounded-pg: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, ArithmeticError, OSError) as exc:
        print(f"confounded-pg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
