"""Run every pipeline stage for a config file and print the report path.

    python3 scripts/run_pipeline.py configs/desk.json [--workdir DIR] [--set key=value ...]
"""

from __future__ import annotations

import argparse
import logging
import time

from foldrare.config import load_config
from foldrare.pipeline import run_all, stage_dir, workdir_lock


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("config")
    parser.add_argument("--workdir")
    parser.add_argument("--set", dest="overrides", action="append", default=[])
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    overrides = list(args.overrides) + ([f"workdir={args.workdir}"] if args.workdir else [])
    cfg = load_config(args.config, overrides)
    t0 = time.perf_counter()
    with workdir_lock(cfg.workdir):
        run_all(cfg, log=logging.getLogger("foldrare").info)
    print(f"{stage_dir(cfg, 'report') / 'report.md'}  ({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
