"""Root logger configuration for CLI runs."""
import logging
import platform
import sys

import numpy as np

from shardgrad.config import get_settings

LOG_FORMAT = "[%(asctime)s] %(levelname)s | %(name)s | %(message)s"


def setup_logging(debug: bool | None = None) -> None:
    # DEBUG comes from the argument, else Settings.debug (DEBUG=1 / true / yes)
    if debug is None:
        debug = get_settings().debug
    log_level = logging.DEBUG if debug else logging.INFO

    # stdout carries CSV and summaries, so logs go to stderr
    logging.basicConfig(
        level=log_level,
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler(sys.stderr)],
        force=True,
    )
    logging.getLogger("asyncio").setLevel(logging.WARNING)

    logging.getLogger(__name__).info(
        "Runtime versions -> numpy=%s, python=%s",
        np.__version__,
        platform.python_version(),
    )
