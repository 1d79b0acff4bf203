"""Command-line entry point: ``fleetsim validate|run|inspect``.

Exit codes: 0 success, 1 runtime error (or missing store for ``inspect``),
2 invalid input (config diagnostics, bad pattern or interval).
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from fleetsim.bus import BusError, validate_pattern
from fleetsim.recorder import StoreError, query_file
from fleetsim.scenario.config import DEFAULT_CONFIG, ConfigError, load_config, validate_config
from fleetsim.scenario.runner import Simulation
from fleetsim.simkernel import SECOND, seconds

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INVALID = 2

log = logging.getLogger("fleetsim")


@dataclass
class RunOptions:
    config_path: Path
    out_dir: Path
    report_path: Path
    log_level: str = "WARNING"
    seed_override: int | None = None


def validate(config_path: str | Path) -> list[str]:
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        return exc.diagnostics
    return validate_config(cfg)


def run(options: RunOptions) -> int:
    try:
        cfg = load_config(options.config_path)
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(f"error: {d}", file=sys.stderr)
        return EXIT_INVALID
    if options.seed_override is not None:
        cfg.seed = options.seed_override
    diags = validate_config(cfg)
    if diags:
        for d in diags:
            print(f"error: {d}", file=sys.stderr)
        return EXIT_INVALID
    try:
        sim = Simulation(cfg, options.out_dir)
        report = sim.run()
        options.report_path.parent.mkdir(parents=True, exist_ok=True)
        options.report_path.write_text(report.to_json() + "\n")
    except Exception as exc:  # noqa: BLE001 - exit-code contract
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    eps = report.episodes
    print(f"episodes: {len(eps)}")
    for ep in eps:
        print(
            f"  {ep['correlation_key']}: enter={ep['t_enter']:.2f}s leave={ep['t_leave']} "
            f"reconciliation={ep.get('reconciliation_s')}s entries={ep.get('entries', 0)}"
        )
    print(f"report: {options.report_path}")
    return EXIT_OK


def inspect(store_path: str | Path, pattern: str, start: float | None, end: float | None, out=None) -> int:
    out = out or sys.stdout
    path = Path(store_path)
    try:
        validate_pattern(pattern)
    except BusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if not path.is_file():
        print(f"error: no store at {path}", file=sys.stderr)
        return EXIT_RUNTIME
    lo = 0 if start is None else seconds(start)
    hi = 2**63 - 1 if end is None else seconds(end)
    try:
        entries = query_file(path, pattern, lo, hi)
    except StoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: unreadable store {path}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    per_topic: Counter[str] = Counter()
    total_bytes = 0
    for e in entries:
        per_topic[e.topic] += 1
        total_bytes += len(e.payload)
        print(
            f"{e.store_sequence:8d}  t={e.publish_time / SECOND:10.3f}s  ingest={e.ingest_time / SECOND:10.3f}s  "
            f"{e.schema_tag:<10} {len(e.payload):7d}B  {e.topic}",
            file=out,
        )
    for topic, n in sorted(per_topic.items()):
        print(f"topic {topic}: {n}", file=out)
    print(f"total: {len(entries)} entries, {total_bytes} payload bytes", file=out)
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fleetsim", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING", help="python logging level (default: WARNING)")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a scenario config and print diagnostics")
    v.add_argument("--config", default=str(DEFAULT_CONFIG))

    r = sub.add_parser("run", help="run a scenario and write the report")
    r.add_argument("--config", default=str(DEFAULT_CONFIG))
    r.add_argument("--out-dir", default="out")
    r.add_argument("--report", default=None, help="report path (default: <out-dir>/report.json)")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--log-level", dest="sub_log_level", default=None)

    i = sub.add_parser("inspect", help="list entries of a recording store")
    i.add_argument("--store", required=True)
    i.add_argument("--pattern", default="#")
    i.add_argument("--from", dest="start", type=float, default=None, help="seconds")
    i.add_argument("--to", dest="end", type=float, default=None, help="seconds")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    level = getattr(args, "sub_log_level", None) or args.log_level
    logging.basicConfig(level=getattr(logging, str(level).upper(), logging.WARNING), format="%(levelname)s %(name)s: %(message)s")

    if args.command == "validate":
        diags = validate(args.config)
        for d in diags:
            print(d)
        if not diags:
            print("ok")
        return EXIT_OK if not diags else EXIT_INVALID

    if args.command == "run":
        out_dir = Path(args.out_dir)
        report = Path(args.report) if args.report else out_dir / "report.json"
        return run(RunOptions(Path(args.config), out_dir, report, str(level), args.seed))

    return inspect(args.store, args.pattern, args.start, args.end)


if __name__ == "__main__":
    sys.exit(main())
