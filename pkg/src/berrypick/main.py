import os
import sys

from loguru import logger

from berrypick.cli import create_cli

# replaced once the command's config is loaded
logger.remove()
logger.add(sys.stderr, level=os.environ.get("LOG_LEVEL", "INFO").upper())


def cli():
    sys.exit(create_cli())


if __name__ == "__main__":
    cli()
