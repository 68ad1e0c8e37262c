"""Command-line entry point: ``python -m emus <command>``.

Exit codes: 0 success, 1 runtime error (sampling, estimation), 2 invalid
configuration.
"""
import argparse
import logging
import sys
from typing import List, Optional

from emus.config import settings
from emus.errors import ConfigError, EmusError
from emus.experiments.config import ExperimentConfig, PRESETS, check_config, load_config, load_preset, with_overrides

logger = logging.getLogger("emus")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _add_config_args(p: argparse.ArgumentParser, overrides: bool = True) -> None:
    p.add_argument("config", nargs="?", help="Path to an experiment config (JSON)")
    p.add_argument("--preset", choices=PRESETS, help="Use a shipped preset instead of a config file")
    if overrides:
        p.add_argument("--replicates", type=int, default=None, help="Override the replicate count")
        p.add_argument("--seed", type=int, default=None, help="Override the base seed")
        p.add_argument("--out", type=str, default=None, help="Override the output directory")
        p.add_argument("--no-ledger", action="store_true", help="Do not record the run in the ledger")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="emus", description="Stratified MCMC estimation with EMUS.")
    ap.add_argument("--log-level", default=settings.log_level, help="Logging level (default: %(default)s)")
    sub = ap.add_subparsers(dest="command", required=True)

    _add_config_args(sub.add_parser("run", help="Run an experiment and write its reports"))
    _add_config_args(sub.add_parser("compare-direct", help="Compare against unstratified sampling at the same budget"))
    _add_config_args(sub.add_parser("validate", help="Check a config without running it"), overrides=False)

    ledger = sub.add_parser("ledger", help="List recorded runs")
    ledger.add_argument("--run", type=int, default=None, help="Show one run and its replicates")
    ledger.add_argument("--limit", type=int, default=20)
    return ap


def _load(args) -> ExperimentConfig:
    if args.preset and args.config:
        raise ConfigError("give either a config path or --preset, not both")
    if not args.preset and not args.config:
        raise ConfigError("a config path or --preset is required")
    config = load_preset(args.preset) if args.preset else load_config(args.config)
    if getattr(args, "replicates", None) is not None or getattr(args, "seed", None) is not None or getattr(args, "out", None):
        config = with_overrides(config, args.replicates, args.seed, args.out)
    return config


def _ledger_db(args):
    if getattr(args, "no_ledger", False):
        return None
    from emus.db import get_db

    return get_db()


def _print_summary(summary) -> None:
    agg = summary.aggregate
    print(f"{summary.name} ({summary.experiment}): {agg.n} replicate(s), mean estimate {agg.mean:.6g}")
    first = summary.replicates[0]
    if first.std_error is not None:
        print(f"  replicate 0: {first.estimate:.6g} +/- {first.std_error:.3g} over {len(first.kept)} strata")
    if first.reference is not None:
        print(f"  reference {first.reference:.6g}, relative error {first.relative_error:+.3g}")
    if agg.within_20pct is not None and agg.n > 1:
        print(f"  within 20% of reference: {agg.within_20pct:.0%}")
    for c in summary.comparisons[:1]:
        print(f"  direct: {c.direct_estimate:.6g} +/- {c.direct_std_error:.3g} at budget {c.budget}")


def _cmd_ledger(args) -> int:
    from emus.db import crud, get_db

    db = get_db()
    with db.session() as session:
        if args.run is not None:
            row = crud.get_run(session, args.run)
            if row is None:
                print(f"No run with id {args.run}", file=sys.stderr)
                return EXIT_RUNTIME
            print(f"[{row.id}] {row.name} {row.command} {row.status} -> {row.output_dir}")
            if row.error_message:
                print(f"  error: {row.error_message}")
            for rep in crud.get_replicates(session, row.id):
                print(f"  replicate {rep.replicate}: estimate={rep.estimate} std_error={rep.std_error}")
            return EXIT_OK
        for row in crud.list_runs(session, limit=args.limit):
            print(f"[{row.id}] {row.started_at:%Y-%m-%d %H:%M} {row.name:<20} {row.kind:<8} {row.command:<15} {row.status}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        if args.command == "ledger":
            return _cmd_ledger(args)
        config = _load(args)
        if args.command == "validate":
            bias = check_config(config)
            print(f"{config.name}: valid ({config.experiment}, {bias.n_strata} strata, "
                  f"{config.sampler.samples_per_stratum()} samples per stratum)")
            return EXIT_OK

        from emus.experiments.runner import compare_direct, run

        command = run if args.command == "run" else compare_direct
        summary = command(config, db=_ledger_db(args))
        _print_summary(summary)
        print(f"Reports written to {config.run_dir}")
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (EmusError, ValueError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
