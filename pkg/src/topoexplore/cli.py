"""Command-line entry point: ``topoexplore <stage> [options]``.

Exit status is 0 on success, 2 for configuration errors and 3 when an
upstream artifact is missing or was produced under a different config.
"""

from __future__ import annotations

import argparse
import sys

from .pipeline import STAGES, ConfigError, DependencyError, Pipeline, load_config

COMMANDS = STAGES + ["render", "bench-vpr", "all"]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topoexplore", description="Exploration, mapping and navigation workbench.")
    p.add_argument("command", choices=COMMANDS, help="pipeline stage to run ('all' runs every stage in order)")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", help="run directory")
    p.add_argument("--mode", help="supervision mode, e.g. full or no-deep-sup")
    p.add_argument("--locomotion", help="step:turn, e.g. 0.25:10 or 0.30:30")
    p.add_argument("--seed", help="master seed")
    p.add_argument("--budget", help="exploration step budget")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any other config key")
    p.add_argument("--quiet", action="store_true")
    return p


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    for key in ("out", "mode", "locomotion", "seed", "budget"):
        val = getattr(args, key)
        if val is not None:
            out[key] = val
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log = (lambda *_: None) if args.quiet else print
    try:
        cfg = load_config(args.config, _overrides(args))
        stages = STAGES if args.command == "all" else [args.command]
        Pipeline(cfg, log).run(stages)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
