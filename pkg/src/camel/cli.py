"""Command-line entry point: ``camel --preset set3 --out runs/set3``."""
from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ABLATIONS, PRESETS, RunConfig, apply_override, load_config, preset
from .errors import CamelError, ConfigError

LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="camel", description="Run heterogeneous multistream mixture-of-experts experiments.")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", metavar="PATH", help="INI run configuration")
    src.add_argument("--preset", metavar="NAME", help=f"built-in scenario: {', '.join(PRESETS)}")
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--out", metavar="DIR", help="write config.ini, metrics.jsonl and summary.json here")
    p.add_argument("--ablation", choices=ABLATIONS, help="model variant")
    p.add_argument("--max-windows", type=int, metavar="N", help="stop after N evaluated windows")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a run field or stream.N.param (repeatable)")
    p.add_argument("--sweep", action="append", default=[], metavar="KEY=V1,V2,...",
                   help="run every combination of the listed values (repeatable)")
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="concurrent sweep runs (processes)")
    p.add_argument("--check", action="store_true", help="run the invariant self-test suite and exit")
    return p


def _split_assignment(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise UsageError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), value.strip()


def base_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        raise UsageError("one of --config or --preset is required")
    for item in args.set:
        cfg = apply_override(cfg, *_split_assignment(item))
    if args.seed is not None:
        cfg = apply_override(cfg, "seed", str(args.seed))
    if args.ablation:
        cfg = apply_override(cfg, "ablation", args.ablation)
    if args.max_windows is not None:
        cfg = apply_override(cfg, "max_windows", str(args.max_windows))
    cfg.validate()
    return cfg


def expand_sweep(cfg: RunConfig, sweeps: list[str]) -> list[tuple[str, RunConfig]]:
    """Cartesian product of ``KEY=V1,V2`` specs; each run gets a directory label."""
    if not sweeps:
        return [("", cfg)]
    axes = []
    for spec in sweeps:
        key, values = _split_assignment(spec)
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise UsageError(f"sweep {key!r} lists no values")
        axes.append([(key, v) for v in vals])
    runs = []
    for combo in itertools.product(*axes):
        c = cfg
        for key, v in combo:
            c = apply_override(c, key, v)
        c.validate()
        runs.append(("_".join(f"{k}={v}" for k, v in combo), c))
    return runs


def _execute(job: tuple[RunConfig, str | None]) -> str:
    from .harness import run

    cfg, out = job
    return run(cfg, out).summary.to_json()


def _configure_logging() -> None:
    level = os.environ.get("CAMEL_LOG_LEVEL", "error").strip().lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"CAMEL_LOG_LEVEL must be one of error, info, debug; got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        if args.check:
            from .selfcheck import run_checks

            return 0 if run_checks() else 1
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        runs = expand_sweep(base_config(args), args.sweep)
    except (UsageError, ConfigError) as exc:
        print(f"camel: error: {exc}", file=sys.stderr)
        return 2

    jobs = []
    for label, cfg in runs:
        out = None
        if args.out:
            out = str(Path(args.out) / label) if label else args.out
        jobs.append((cfg, out))
    try:
        if args.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = list(pool.map(_execute, jobs))
        else:
            results = [_execute(j) for j in jobs]
    except CamelError as exc:
        print(f"camel: error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("camel: interrupted", file=sys.stderr)
        return 130
    if not args.out:
        for r in results:
            print(r)
    else:
        for (label, _), (_, out) in zip(runs, jobs):
            print(f"wrote {out}" + (f" ({label})" if label else ""))
    return 0


if __name__ == "__main__":
    sys.exit(main())
