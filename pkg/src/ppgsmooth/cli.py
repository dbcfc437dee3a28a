"""Command-line entry point.

    ppgsmooth smooth   --config exp.toml --set run.n=300
    ppgsmooth bias-k0  --set bias_k0.k_grid=[2,4,8]
    ppgsmooth learn    --set learn.seeds=5
    ppgsmooth diag     --set diag.rho=1.5
    ppgsmooth simulate --set model.horizon=200 --set run.output=obs.csv
    ppgsmooth diag --check

Exit codes: 0 success, 2 config error, 3 every replicate failed,
4 an acceptance check failed (``--check``).
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, NonpositiveBoundError
from .experiments import COMMANDS, load_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ppgsmooth", description="Particle smoothing experiments with CSV output."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "smooth": "replicate smoothing estimates against the exact reference",
        "bias-k0": "bias of the roll-out estimator over a (k, k0) grid",
        "learn": "score ascent with PPG and PGAS gradients",
        "diag": "strong-mixing constants over a particle grid",
        "simulate": "write a synthetic observation record",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="TOML config file")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
            help="override a config entry, e.g. run.n=200 (repeatable; wins over the file)",
        )
        p.add_argument("--check", action="store_true", help="run the acceptance checks for this command")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.command, args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.check:
        from .acceptance import COMMAND_CHECKS, run_checks

        results = run_checks(COMMAND_CHECKS[args.command])
        return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK
    try:
        result = COMMANDS[args.command](cfg)
    except (ConfigError, NonpositiveBoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for path in result.paths:
        print(path)
    if result.failures:
        print(f"{result.failures} of {result.total} replicates failed", file=sys.stderr)
    return EXIT_RUNTIME if result.all_failed else EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
