"""Command-line entry point: ``unlearnlab <subcommand> [--config FILE] [--out DIR] ...``.

Exit codes: 0 success, 2 configuration error, 3 stage failure, 4 access-audit violation.
"""

from __future__ import annotations

import argparse
import sys

from . import __version__
from .audit import AuditViolation
from .experiment import (
    ConfigError, ExperimentConfig, ReportError, Runner, StageFailure, emit_plots, epoch_sweep,
    load_config,
)
from .unlearn import METHODS

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_AUDIT = 0, 2, 3, 4


def default_config() -> ExperimentConfig:
    """Every unlearning method at the desk preset, relearning from the retain set only."""
    return ExperimentConfig.from_dict({"methods": [{"method": m} for m in METHODS]})


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON experiment file (default: all methods, desk preset)")
    common.add_argument("--out", default="runs/default", help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--preset", choices=["paper", "desk"], help="override the config preset")
    common.add_argument("--threads", type=int, default=1, help="independent stages run concurrently")
    common.add_argument("-q", "--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="unlearnlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the pretrained and retrained models")
    sub.add_parser("unlearn", parents=[common], help="run every configured unlearning method")
    sub.add_parser("attack", parents=[common], help="relearning, quantization and MIA attacks")
    sub.add_parser("diagnose", parents=[common], help="interpolation curves and barriers")
    sub.add_parser("run", parents=[common], help="full pipeline including reports")
    sw = sub.add_parser("sweep", parents=[common], help="vary the unlearning epoch budget")
    sw.add_argument("--epochs", required=True,
                    help="comma-separated epoch budgets, e.g. 1,10,30")
    sw.add_argument("--methods", help="comma-separated method names (default: all in config)")
    sub.add_parser("plot", parents=[common], help="re-render SVG plots of a finished run")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.preset is not None:
        cfg = cfg.with_preset(args.preset)
    return cfg


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 0:
        raise ConfigError("epoch budgets must be non-negative integers")
    return vals


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        if args.command == "plot":
            for path in emit_plots(args.out).values():
                print(path)
            return EXIT_OK
        cfg = _config(args)
        if args.command == "sweep":
            methods = args.methods.split(",") if args.methods else None
            rows = epoch_sweep(cfg, args.out, _int_list(args.epochs), methods, log=log)
            for r in rows:
                print(f"{r.method:28s} epochs={r.epochs:<4d} test={r.test_acc:.3f} "
                      f"forget={r.forget_acc_unlearned:.3f} relearned={r.forget_acc_relearned:.3f}")
            return EXIT_OK
        runner = Runner(cfg, args.out, threads=args.threads, log=log)
        until = {"pretrain": "pretrain", "unlearn": "unlearn", "attack": "attack",
                 "diagnose": "diagnose", "run": "report"}[args.command]
        if until == "diagnose":
            runner.stage_diagnose()
        else:
            runner.run(until)
        if args.command == "run":
            print(runner.out / "report")
        log(f"{len(runner.trained)} stage(s) computed, manifest at {runner.manifest.path}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AuditViolation as exc:
        print(f"audit violation: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except (StageFailure, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
