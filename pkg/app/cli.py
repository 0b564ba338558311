import argparse
import logging
import sys
from typing import Optional, Sequence

from pydantic import ValidationError

from app.commands import dataset, dla, patch, run
from app.config import settings
from app.errors import EXIT_CONFIG, WorkbenchError

logger = logging.getLogger("app.cli")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="interp-workbench",
        description=f"{settings.PROJECT_NAME} {settings.PROJECT_VERSION}: "
                    "GPT-2 Small logits, attribution and patching for compliance prompts")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    subparsers = parser.add_subparsers(dest="command", required=True)
    run.register(subparsers)
    dla.register(subparsers)
    patch.register(subparsers)
    dataset.register(subparsers)
    return parser


def configure_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad usage, which is also our config exit code
        return EXIT_CONFIG if e.code else 0
    configure_logging(args.verbose)

    try:
        return args.func(args)
    except WorkbenchError as e:
        logger.error("[%s] %s: %s", args.command, type(e).__name__, e.detail)
        return e.exit_code
    except ValidationError as e:
        logger.error("[%s] invalid %s: %s", args.command, e.title, e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
