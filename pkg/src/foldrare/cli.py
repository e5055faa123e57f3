"""Command-line entry point.

    foldrare <stage> [--config PATH] [--seed N] [--set key=value ...]
    foldrare all     [--config PATH] ...

Exit codes: 0 ok, 2 I/O or data error, 3 missing upstream stage, 4 config error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from foldrare.config import ConfigError, load_config
from foldrare.grid import VolumeFormatError
from foldrare.pipeline import RUNNERS, STAGES, MissingStage, StageError, WorkdirLocked, run_all, workdir_lock

EXIT_OK, EXIT_IO, EXIT_MISSING, EXIT_CONFIG = 0, 2, 3, 4

log = logging.getLogger("foldrare")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foldrare", description="Rare fold pattern detection pipeline.")
    parser.add_argument("command", choices=[*STAGES, "all"])
    parser.add_argument("--config", help="pipeline config JSON (defaults built in)")
    parser.add_argument("--seed", type=int, help="top-level seed (u64)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field by dotted path; repeatable")
    parser.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    parser.add_argument("-q", "--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except OSError as e:
        log.error("cannot read config: %s", e)
        return EXIT_IO
    if args.dump_config:
        sys.stdout.write(cfg.dumps())
        return EXIT_OK
    try:
        with workdir_lock(cfg.workdir):
            if args.command == "all":
                run_all(cfg, log=log.info)
            else:
                RUNNERS[args.command](cfg, log.info)
    except MissingStage as e:
        log.error("%s", e)
        return EXIT_MISSING
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except (OSError, VolumeFormatError, StageError, WorkdirLocked) as e:
        log.error("%s", e)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
