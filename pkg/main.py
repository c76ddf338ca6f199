#!/usr/bin/env python3
"""
Command-line entry point for the toolforge pipeline
"""

import argparse
import asyncio
import sys
from typing import List, Optional

from dotenv import load_dotenv

from app.config import load_pipeline_config, settings
from app.exceptions import ConfigError, ToolforgeError
from app.services.pipeline_service import STAGES, PipelineService
from app.utils.logger import configure_logging, get_logger

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

logger = get_logger("toolforge")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="toolforge",
        description="Synthesize multi-turn tool-use training data from raw tool definitions",
    )
    parser.add_argument("stage", choices=[*STAGES, "run-all"], help="Stage to run, or run-all for every stage in order")
    parser.add_argument("--config", required=True, help="Pipeline config JSON")
    parser.add_argument("--resume", action="store_true", help="Reuse finished items of earlier runs")
    parser.add_argument("--seed", type=int, default=None, help="Override rng_seed")
    parser.add_argument("--limit", type=int, default=None, help="Cap the number of items the stage processes")
    return parser


async def _run(args: argparse.Namespace) -> None:
    overrides = {"rng_seed": args.seed} if args.seed is not None else None
    cfg = load_pipeline_config(args.config, overrides)
    service = PipelineService(cfg, resume=args.resume, limit=args.limit)
    if args.stage == "run-all":
        manifests = await service.run_all()
    else:
        manifests = [await service.run_stage(args.stage)]
    for manifest in manifests:
        print(f"{manifest.stage}: {manifest.item_counts}")


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    configure_logging(settings.TOOLFORGE_LOG_LEVEL)
    args = build_parser().parse_args(argv)
    if args.limit is not None and args.limit < 1:
        logger.error("--limit must be positive")
        return EXIT_CONFIG
    try:
        asyncio.run(_run(args))
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except ToolforgeError as e:
        logger.error("Stage failed: %s: %s", type(e).__name__, e)
        return EXIT_STAGE
    except KeyboardInterrupt:
        logger.warning("Interrupted; rerun with --resume to continue")
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
