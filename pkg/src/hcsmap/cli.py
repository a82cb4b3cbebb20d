"""Command-line entry point: ``hcsmap <command> <config.json> [--seed N] [--threads N]``.

Exit status is 0 on success, 1 on any pipeline error (one-line diagnostic on
stderr) and 2 when the config or arguments cannot be parsed.
"""

from __future__ import annotations

import argparse
import logging
import sys

from threadpoolctl import threadpool_limits

from .pipeline import COMMANDS, GRAD_CHECK_TOL, OUT_ENV, ConfigError, Pipeline, PipelineConfig


def build_parser():
    p = argparse.ArgumentParser(prog="hcsmap", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("config", nargs="?", help="pipeline JSON config (defaults apply if omitted)")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--threads", type=int, help="cap worker threads; 1 is deterministic")
    p.add_argument("--out", help=f"output root (overrides ${OUT_ENV} and the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg.apply_seed(args.seed)
        if args.threads is not None:
            cfg.threads = args.threads
        if cfg.threads < 1:
            raise ConfigError("threads must be >= 1")
    except ConfigError as e:
        print(f"hcsmap: config error: {e}", file=sys.stderr)
        return 2

    pipe = Pipeline(cfg, args.out)
    try:
        with threadpool_limits(limits=cfg.threads):
            result = COMMANDS[args.command](pipe)
    except Exception as e:  # noqa: BLE001 - any stage failure maps to exit 1
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"hcsmap {args.command}: error: {msg}", file=sys.stderr)
        return 1

    if args.command == "grad-check":
        worst = max(result.values())
        for name, err in result.items():
            print(f"{name}: {err:.3e}")
        print(f"max relative error: {worst:.3e}")
        return 0 if worst < GRAD_CHECK_TOL else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
