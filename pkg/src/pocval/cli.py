"""Command-line entry point: ``pocval validate | slice | report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .engine import DEFAULT_BUDGET, EngineConfig
from .errors import ConfigurationError, EnvironmentSetupError, PocvalError
from .findings import FORMATS
from .harness import DEFAULT_TIMEOUT
from .llm import DEFAULT_TEMPERATURE
from .pipeline import RunConfig, report, slice_findings, validate

EXIT_CONFIG = 2
EXIT_ENV = 3
EXIT_ERROR = 1


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--findings", required=True, type=Path, help="findings file")
    p.add_argument("--format", default="native", choices=FORMATS)
    p.add_argument("--project", required=True, type=Path, help="project root (or parent of project_ref dirs)")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--transcript", type=Path, help="replay LLM replies from a JSONL transcript")
    p.add_argument("--llm-endpoint", help="OpenAI-compatible base URL (key via POCVAL_LLM_API_KEY)")
    p.add_argument("--model", help="model name for the live endpoint")
    p.add_argument("--max-in-flight", type=int, default=32, help="concurrent LLM requests")
    p.add_argument("--all-severities", action="store_true", help="keep non-High findings")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pocval", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="run the full pipeline and write a report")
    _common(v)
    v.add_argument("--workers", type=int, default=32)
    v.add_argument("--budget", type=int, default=DEFAULT_BUDGET, help="retry budget B")
    v.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE)
    v.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT, help="seconds per forge invocation")
    v.add_argument("--fake-executor", nargs="?", const=True, default=None, metavar="SCRIPT",
                   help="scripted executor instead of forge; without SCRIPT every run passes")
    v.add_argument("--fork-url", help="RPC URL; tests fork at the current head block")
    v.add_argument("--resume", action="store_true", help="skip findings that already have a verdict")

    s = sub.add_parser("slice", help="bug-context extraction only")
    _common(s)

    r = sub.add_parser("report", help="rebuild the report from stored verdicts")
    r.add_argument("dir", type=Path)
    r.add_argument("--json", action="store_true", help="print report.json instead of the summary")
    return ap


def _config(args) -> RunConfig:
    kw = dict(
        findings=args.findings, format=args.format, project=args.project, out=args.out,
        transcript=args.transcript, llm_endpoint=args.llm_endpoint, model=args.model,
        max_in_flight=args.max_in_flight, high_only=not args.all_severities,
    )
    if args.command == "validate":
        fake = args.fake_executor
        kw.update(
            workers=args.workers,
            engine=EngineConfig(retry_budget=args.budget, temperature=args.temperature, timeout=args.timeout),
            fake_executor=fake if fake is True or fake is None else Path(fake),
            fork_url=args.fork_url,
            resume=args.resume,
        )
    return RunConfig(**kw)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "report":
            rep = report(args.dir)
            print(json.dumps(rep.to_json(), indent=2, sort_keys=True) if args.json else rep.summary())
        elif args.command == "slice":
            bundles = slice_findings(_config(args))
            for fid, b in bundles.items():
                print(f"{fid}: {len(b.slice)} definitions -> {args.out / fid / 'bundle'}")
        else:
            rep = validate(_config(args))
            print(rep.summary())
    except (ConfigurationError, ValueError) as exc:
        print(f"pocval: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EnvironmentSetupError as exc:
        print(f"pocval: environment error: {exc}", file=sys.stderr)
        return EXIT_ENV
    except PocvalError as exc:
        print(f"pocval: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return 0
