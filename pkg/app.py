# Block-ordering analytics - command line entry point
# Runs ingest checks, placement fits, marginal effects, insurance, sandwich and concentration reports

import argparse
import sys
from typing import List, Optional

from dateutil import parser as date_parser

from config import PipelineConfig, load_config, setup_logging
from errors import MevAnalyticsError
from pipeline_runner import COMMANDS, run_pipeline


def _date(text: str):
    return date_parser.isoparse(text).date()


def _dates(text: str):
    return tuple(_date(part) for part in text.split(",") if part.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mev-order",
        description="Transaction reordering analytics over daily Ethereum block data",
    )
    parser.add_argument("commands", nargs="*", metavar="COMMAND",
                        help=f"stages to run, any of {', '.join(COMMANDS)} (default: report = every analysis)")
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--from", dest="start", type=_date, help="first UTC day (YYYY-MM-DD)")
    parser.add_argument("--to", dest="end", type=_date, help="last UTC day (YYYY-MM-DD)")
    parser.add_argument("--exclude", type=_dates, help="comma-separated days to leave out")
    parser.add_argument("--extended", action="store_true", help="add front-run / back-run regressors")
    parser.add_argument("--deciles", action="store_true", help="ten position buckets instead of quartiles")
    parser.add_argument("--dump-design", action="store_true", help="write each day's design rows to the report")
    parser.add_argument("--seed", type=int, help="seed for synthetic data and bootstraps")
    parser.add_argument("--out", help="report directory")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING ...")
    return parser


def apply_overrides(config: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    """Command-line flags win over the config file"""
    raw = config.model_dump()
    ingest = raw["ingest"]
    if args.start:
        ingest["start"] = args.start
    if args.end:
        ingest["end"] = args.end
    if args.exclude:
        ingest["exclude"] = tuple(sorted(set(ingest["exclude"]) | set(args.exclude)))
    if args.extended:
        raw["extended"] = True
    if args.deciles:
        raw["probit"]["buckets"] = 10
    if args.dump_design:
        raw["dump_design"] = True
    if args.seed is not None:
        raw["seed"] = args.seed
        raw["synth"]["seed"] = args.seed
    if args.out:
        raw["output_dir"] = args.out
    return PipelineConfig.model_validate(raw)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.commands = args.commands or ["report"]
    unknown = [c for c in args.commands if c not in COMMANDS]
    if unknown:
        parser.error(f"unknown command(s): {', '.join(unknown)}")
    try:
        config = apply_overrides(load_config(args.config), args)
    except (MevAnalyticsError, ValueError) as e:
        print(f"❌ Configuration error: {e}")
        return 2
    setup_logging(args.log_level or "INFO")

    print(f"🔧 Running {', '.join(args.commands)} -> {config.output_dir}")
    try:
        bundle = run_pipeline(config, args.commands, progress=lambda message: print(f"  • {message}"))
    except MevAnalyticsError as e:
        print(f"❌ {e}")
        return 2

    print(f"📄 {len(bundle.outputs)} files written, config {bundle.config_hash[:12]}")
    if bundle.errors:
        print(f"⚠️ Incomplete run, {len(bundle.errors)} error(s):")
        for err in bundle.errors:
            print(f"   {err}")
        return 1
    print("✅ Done")
    return 0


if __name__ == "__main__":
    sys.exit(main())
