"""Command-line entry point: one subcommand per pipeline stage, plus ``run``.

Exit codes: 0 success, 1 runtime failure, 2 missing upstream artifact,
3 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from .pipeline import PIPELINE, STAGES, Context, MissingUpstreamError, run_all, run_command

log = logging.getLogger("txalign")

EXIT_FAILURE, EXIT_MISSING, EXIT_CONFIG = 1, 2, 3


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _key_values(items: list[str], flag: str) -> dict[str, object]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(flag, f"expected key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--artifacts-dir", help="artifact directory (default from config)")
    common.add_argument("--mock", action="store_true", help="force offline generation and embedding")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set alignment.epochs=3 (value parsed as JSON if possible)")
    common.add_argument("--force", action="store_true", help="rerun even if inputs are unchanged")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="txalign", description="Event-sequence / text alignment pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    ingest = sub.add_parser("ingest", parents=[common], help="load an event CSV")
    ingest.add_argument("csv", help="event CSV path")
    ingest.add_argument("--schema", action="append", default=[], metavar="FIELD=COLUMN",
                        help="map a logical field (client_id, timestamp, amount, mcc, tx_type, label) to a CSV column")
    ingest.add_argument("--mcc-names", help="CSV of index,name")
    for name in PIPELINE:
        p = sub.add_parser(name, parents=[common])
        if name == "evaluate":
            p.add_argument("--k", type=int, help="number of folds")
            p.add_argument("--variants", help="comma-separated variant tags to evaluate")
    sub.add_parser("run", parents=[common], help="every stage in order")
    sub.add_parser("show-config", parents=[common], help="print the resolved config")
    return parser


def resolve_config(args: argparse.Namespace):
    overrides: dict[str, object] = {k: _parse_value(v) for k, v in _key_values(args.set, "--set").items()}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.artifacts_dir:
        overrides["artifacts_dir"] = args.artifacts_dir
    if args.mock:
        overrides["generation.mock"] = True
        overrides["embedding.mock"] = True
    if args.command == "ingest":
        overrides["data.source"] = "csv"
        overrides["data.csv_path"] = args.csv
        if args.schema:
            overrides["data.schema"] = _key_values(args.schema, "--schema")
        if args.mcc_names:
            overrides["data.mcc_names_path"] = args.mcc_names
    if args.command == "evaluate":
        if args.k is not None:
            overrides["eval.k"] = args.k
        if args.variants:
            overrides["eval.variants"] = [v.strip() for v in args.variants.split(",") if v.strip()]
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "show-config":
        sys.stdout.write(config.to_json())
        return 0
    ctx = Context(config, config.artifacts_dir)
    try:
        if args.command == "run":
            run_all(ctx, args.force)
        else:
            ran = run_command(ctx, args.command, args.force)
            if not ran:
                print(f"{STAGES[args.command][0]}: up to date")
    except MissingUpstreamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # surfaced as a one-line message; -v shows the traceback
        log.debug("stage failed", exc_info=True)
        if args.verbose:
            log.exception("%s failed", args.command)
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
